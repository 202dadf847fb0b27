//! `ofit`: corpus → prompts → SFT → DPO → evaluation, one subcommand per stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use outfit_align::corpus::{synth_corpus, Corpus, Split};
use outfit_align::eval::{report, report_json, MetricsReport};
use outfit_align::model::{Checkpoint, Network};
use outfit_align::pipeline::{
    build_base, ingest, run_dpo, run_eval, run_sft, Manifest, Preset, RunConfig, PEFT, PEFT_DPO,
    PLAIN,
};
use outfit_align::promptgen::{dpo_pairs, sft_records, write_jsonl};
use outfit_align::train::gradcheck::{dpo_check, eps_sweep, sft_check};

const PASS_THRESHOLD: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "ofit",
    version,
    about = "Preference-aligned outfit compatibility and fill-in-the-blank"
)]
struct Cli {
    /// Flat `key = value` config file with dotted keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Hyperparameter preset applied before the config file and overrides.
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    preset: Option<String>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Corpus directory (`data.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Run directory (`data.out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a Polyvore-format corpus and copy it, normalized, into the run directory.
    Ingest,
    /// Write a synthetic rule-governed corpus to the corpus directory.
    Synth {
        /// Number of outfits (default `data.synth_outfits`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Render SFT records and preference pairs as JSONL.
    Prompts,
    /// Build the base model if absent, then train LoRA adapters on it.
    TrainSft,
    /// Preference-optimize the SFT checkpoint against a frozen copy of itself.
    TrainDpo,
    /// Score checkpoints on the test split and print the comparison table.
    Eval {
        /// Models to evaluate (default: every checkpoint present).
        #[arg(long, value_parser = ["plain", "sft", "dpo"])]
        model: Vec<String>,
    },
    /// Finite-difference check of the SFT and DPO gradients on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Also print the error across a range of step sizes.
        #[arg(long)]
        sweep: bool,
    },
    /// Render metrics JSON files as one table.
    Report {
        #[arg(long = "in", num_args = 1.., required = true, value_name = "FILE")]
        inputs: Vec<PathBuf>,
        /// Also write the combined rows as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth { .. } => "synth",
            Command::Prompts => "prompts",
            Command::TrainSft => "train-sft",
            Command::TrainDpo => "train-dpo",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Report { .. } => "report",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Preset, then config file, then `--set`, then the dedicated flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let preset = cli
        .preset
        .as_deref()
        .map(str::parse::<Preset>)
        .transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::from_text(&text, preset)
                .with_context(|| format!("in config {}", path.display()))?
        }
        None => RunConfig::preset(preset.unwrap_or(Preset::Desk)),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.data {
        cfg.data.dir = dir.clone();
    }
    if let Some(dir) = &cli.out {
        cfg.data.out = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = resolve_config(&cli)?;
    let out = cfg.data.out.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating run directory {}", out.display()))?;
    let mut manifest = Manifest::new(cli.command.name(), &cfg);
    if let Some(path) = &cli.config {
        manifest.input(path)?;
    }

    let code = match &cli.command {
        Command::Ingest => {
            for path in corpus_files(&cfg.data.dir)? {
                manifest.input(&path)?;
            }
            let corpus = ingest(&cfg)?;
            let dir = out.join("corpus");
            corpus.save(&dir)?;
            summarize(&corpus);
            for path in corpus_files(&dir)? {
                manifest.output(&path)?;
            }
            ExitCode::SUCCESS
        }
        Command::Synth { n } => {
            let corpus = synth_corpus(n.unwrap_or(cfg.data.synth_outfits), cfg.seed)?;
            corpus.save(&cfg.data.dir)?;
            summarize(&corpus);
            for path in corpus_files(&cfg.data.dir)? {
                manifest.output(&path)?;
            }
            ExitCode::SUCCESS
        }
        Command::Prompts => {
            let corpus = load_corpus(&cfg, &mut manifest)?;
            let dir = out.join("prompts");
            std::fs::create_dir_all(&dir)?;
            for split in Split::ALL {
                let tasks = corpus.tasks(split);
                let path = dir.join(format!("sft_{split}.jsonl"));
                write_jsonl(
                    &path,
                    &sft_records(&tasks.fitb, &tasks.cp, &corpus.captions)?,
                )?;
                manifest.output(&path)?;
            }
            let pairs = dpo_pairs(
                &corpus.train.fitb,
                &corpus.train.cp,
                &corpus.captions,
                cfg.fitb_pairs,
                cfg.seed,
            )?;
            let path = dir.join("dpo_train.jsonl");
            write_jsonl(&path, &pairs)?;
            manifest.output(&path)?;
            ExitCode::SUCCESS
        }
        Command::TrainSft => {
            let corpus = load_corpus(&cfg, &mut manifest)?;
            let base_path = out.join("base.ckpt");
            let base = if base_path.exists() {
                let ckpt = Checkpoint::load(&base_path)?;
                if ckpt.config() != cfg.model || ckpt.lora.is_some() {
                    bail!(
                        "{} does not match the configured base model; remove it to rebuild",
                        base_path.display()
                    );
                }
                info!("reusing base model {}", base_path.display());
                manifest.input(&base_path)?;
                ckpt.base
            } else {
                info!("building base model ({} documents)", cfg.pretrain_docs);
                let (base, rep) = build_base(&cfg, &corpus)?;
                Checkpoint {
                    base: base.clone(),
                    lora: None,
                }
                .save(&base_path)?;
                manifest.output(&base_path)?;
                manifest.output(&write_json(&out.join("pretrain_report.json"), &rep)?)?;
                base
            };
            let (sft, rep) = run_sft(&cfg, &corpus, base)?;
            let path = out.join("sft.ckpt");
            sft.save(&path)?;
            manifest.output(&path)?;
            manifest.output(&write_json(&out.join("sft_report.json"), &rep)?)?;
            ExitCode::SUCCESS
        }
        Command::TrainDpo => {
            let corpus = load_corpus(&cfg, &mut manifest)?;
            let sft_path = out.join("sft.ckpt");
            if !sft_path.exists() {
                bail!("{} not found; run train-sft first", sft_path.display());
            }
            manifest.input(&sft_path)?;
            let sft = Checkpoint::load(&sft_path)?;
            let (dpo, rep) = run_dpo(&cfg, &corpus, &sft)?;
            let path = out.join("dpo.ckpt");
            dpo.save(&path)?;
            manifest.output(&path)?;
            manifest.output(&write_json(&out.join("dpo_report.json"), &rep)?)?;
            ExitCode::SUCCESS
        }
        Command::Eval { model } => {
            let corpus = load_corpus(&cfg, &mut manifest)?;
            let all = [
                ("plain", "base.ckpt", PLAIN),
                ("sft", "sft.ckpt", PEFT),
                ("dpo", "dpo.ckpt", PEFT_DPO),
            ];
            let chosen: Vec<_> = if model.is_empty() {
                all.iter()
                    .filter(|(_, file, _)| out.join(file).exists())
                    .collect()
            } else {
                all.iter()
                    .filter(|(name, _, _)| model.iter().any(|m| m == name))
                    .collect()
            };
            if chosen.is_empty() {
                bail!("no checkpoints in {}; run train-sft first", out.display());
            }
            let mut rows = Vec::new();
            for (name, file, strategy) in chosen {
                let path = out.join(file);
                if !path.exists() {
                    bail!("{} not found", path.display());
                }
                manifest.input(&path)?;
                let ckpt = Checkpoint::load(&path)?;
                // the base checkpoint is dense; scoring through the adapters is not needed
                let net = match &ckpt.lora {
                    Some(_) => ckpt.network(),
                    None => Network::dense(&ckpt.base),
                };
                let row = run_eval(&cfg, &corpus, &net, strategy)?;
                let path = out.join(format!("eval_{name}.json"));
                std::fs::write(&path, report_json(std::slice::from_ref(&row)))?;
                manifest.output(&path)?;
                rows.push(row);
            }
            let path = out.join("eval.json");
            std::fs::write(&path, report_json(&rows))?;
            manifest.output(&path)?;
            print!("{}", report(&rows));
            ExitCode::SUCCESS
        }
        Command::Gradcheck { eps, sweep } => {
            let checks = [
                ("sft", sft_check(*eps, cfg.seed)?),
                ("dpo", dpo_check(*eps, cfg.seed)?),
            ];
            let mut pass = true;
            for (name, r) in &checks {
                let ok = r.max_rel_error < PASS_THRESHOLD;
                pass &= ok;
                println!(
                    "{name}: max relative error {:.3e} over {} coordinates (worst {}) {}",
                    r.max_rel_error,
                    r.coords,
                    r.worst,
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            let mut rows: serde_json::Map<String, serde_json::Value> = checks
                .iter()
                .map(|(n, r)| {
                    (
                        n.to_string(),
                        serde_json::to_value(r).expect("serializable"),
                    )
                })
                .collect();
            if *sweep {
                let points = eps_sweep(cfg.seed)?;
                println!("{:>8}  {:>10}  {:>10}", "eps", "sft", "dpo");
                for p in &points {
                    println!("{:>8.0e}  {:>10.3e}  {:>10.3e}", p.eps, p.sft, p.dpo);
                }
                rows.insert("sweep".into(), serde_json::to_value(&points)?);
            }
            manifest.output(&write_json(&out.join("gradcheck.json"), &rows)?)?;
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Report { inputs, json } => {
            let mut rows = Vec::new();
            for path in inputs {
                manifest.input(path)?;
                rows.extend(read_reports(path)?);
            }
            print!("{}", report(&rows));
            if let Some(path) = json {
                std::fs::write(path, report_json(&rows))
                    .with_context(|| format!("writing {}", path.display()))?;
                manifest.output(path)?;
            }
            ExitCode::SUCCESS
        }
    };

    let path = out.join(format!("manifest-{}.json", cli.command.name()));
    manifest.write(&path)?;
    info!("manifest written to {}", path.display());
    Ok(code)
}

/// The ingested copy in the run directory if present, else the corpus directory.
fn load_corpus(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Corpus> {
    let ingested = cfg.data.out.join("corpus");
    let (dir, corpus) = if ingested.is_dir() {
        (ingested.clone(), Corpus::load(&ingested)?)
    } else {
        (cfg.data.dir.clone(), ingest(cfg)?)
    };
    for path in corpus_files(&dir)? {
        manifest.input(&path)?;
    }
    Ok(corpus)
}

fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus directory {}", dir.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if path.is_file() && matches!(ext, Some("json" | "txt")) && !is_manifest(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn is_manifest(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("manifest-"))
}

fn summarize(corpus: &Corpus) {
    for split in Split::ALL {
        let t = corpus.tasks(split);
        info!(
            "{split}: {} outfits, {} FITB questions, {} CP examples",
            corpus.outfits_in(split).count(),
            t.fitb.len(),
            t.cp.len()
        );
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// A metrics file holds one report or a list of them.
fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let rows = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    rows.with_context(|| format!("{} is not a metrics report", path.display()))
}
