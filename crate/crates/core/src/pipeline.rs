//! Run configuration, presets, manifests, and the stage functions that chain
//! corpus → prompts → pretraining stand-in → SFT → DPO → evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{make_cp_negatives, sample_outfits, Corpus, Outfit, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, FitbScoring, MetricsReport};
use crate::lora::LoraConfig;
use crate::model::{Checkpoint, ModelConfig, ModelParams, Network, Proj};
use crate::promptgen::{dpo_pairs, pretraining_records, sft_records, FitbPairs};
use crate::tensor::Scalar;
use crate::train::{pretrain, train_dpo, train_sft, TrainConfig, TrainReport};

pub const PLAIN: &str = "Plain LLM";
pub const PEFT: &str = "PEFT LLM (LoRA)";
pub const PEFT_DPO: &str = "PEFT DPO LLM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published hyperparameters on a sample of the real corpus.
    Paper,
    /// Synthetic corpus and step sizes that move a miniature model.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper or desk)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Corpus directory (read by `ingest`, written by `synth`).
    pub dir: PathBuf,
    /// Run directory for prompts, checkpoints, reports and manifests.
    pub out: PathBuf,
    pub synth_outfits: usize,
    /// Training outfits kept at ingestion; 0 keeps all.
    pub sample_outfits: usize,
    pub cp_negative_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub pretrain: TrainConfig,
    pub pretrain_docs: usize,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
    pub fitb_pairs: FitbPairs,
    pub scoring: FitbScoring,
    pub data: DataConfig,
}

const TRAIN_KEYS: [&str; 10] = [
    "lr_max",
    "warmup_ratio",
    "epochs",
    "batch",
    "grad_accum",
    "beta",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn set_train(cfg: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "lr_max" => cfg.lr_max = parse(key, v)?,
        "warmup_ratio" => cfg.warmup_ratio = parse(key, v)?,
        "epochs" => cfg.epochs = parse(key, v)?,
        "batch" => cfg.batch = parse(key, v)?,
        "grad_accum" => cfg.grad_accum = parse(key, v)?,
        "beta" => cfg.beta = parse(key, v)?,
        "weight_decay" => cfg.weight_decay = parse(key, v)?,
        "adam_beta1" => cfg.adam_beta1 = parse(key, v)?,
        "adam_beta2" => cfg.adam_beta2 = parse(key, v)?,
        "adam_eps" => cfg.adam_eps = parse(key, v)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

fn get_train(cfg: &TrainConfig, field: &str) -> String {
    match field {
        "lr_max" => format!("{:?}", cfg.lr_max),
        "warmup_ratio" => format!("{:?}", cfg.warmup_ratio),
        "epochs" => cfg.epochs.to_string(),
        "batch" => cfg.batch.to_string(),
        "grad_accum" => cfg.grad_accum.to_string(),
        "beta" => format!("{:?}", cfg.beta),
        "weight_decay" => format!("{:?}", cfg.weight_decay),
        "adam_beta1" => format!("{:?}", cfg.adam_beta1),
        "adam_beta2" => format!("{:?}", cfg.adam_beta2),
        "adam_eps" => format!("{:?}", cfg.adam_eps),
        _ => unreachable!("listed in TRAIN_KEYS"),
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let data = DataConfig {
            dir: PathBuf::from("data"),
            out: PathBuf::from("run"),
            synth_outfits: 500,
            sample_outfits: 0,
            cp_negative_ratio: 1.0,
        };
        let desk = Self {
            preset,
            seed: 1,
            model: ModelConfig::desk(),
            lora: LoraConfig::default(),
            pretrain: TrainConfig::desk_pretrain(),
            pretrain_docs: 1000,
            sft: TrainConfig::desk_sft(),
            dpo: TrainConfig::desk_dpo(),
            fitb_pairs: FitbPairs::One,
            scoring: FitbScoring::Mean,
            data,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => Self {
                sft: TrainConfig::paper_sft(),
                dpo: TrainConfig::paper_dpo(),
                fitb_pairs: FitbPairs::All,
                data: DataConfig {
                    sample_outfits: 1000,
                    ..desk.data.clone()
                },
                ..desk
            },
        }
    }

    /// Sets one dotted key. `train.<field>` sets the field in both fine-tuning stages.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match (section, field) {
            ("", "preset") => self.preset = v.parse()?,
            ("", "seed") => self.seed = parse(key, v)?,
            ("model", "d_model") => self.model.d_model = parse(key, v)?,
            ("model", "n_layers") => self.model.n_layers = parse(key, v)?,
            ("model", "n_heads") => self.model.n_heads = parse(key, v)?,
            ("model", "n_kv_heads") => self.model.n_kv_heads = parse(key, v)?,
            ("model", "window") => self.model.window = parse(key, v)?,
            ("model", "d_ff") => self.model.d_ff = parse(key, v)?,
            ("model", "max_seq") => self.model.max_seq = parse(key, v)?,
            ("lora", "rank") => self.lora.rank = parse(key, v)?,
            ("lora", "alpha") => self.lora.alpha = parse(key, v)?,
            ("lora", "init_std") => self.lora.init_std = parse(key, v)?,
            ("lora", "targets") => {
                self.lora.targets = v
                    .split(',')
                    .map(|t| {
                        Proj::parse(t.trim()).ok_or_else(|| {
                            Error::Config(format!("{key}: unknown projection {t:?}"))
                        })
                    })
                    .collect::<Result<_>>()?
            }
            ("pretrain", "docs") => self.pretrain_docs = parse(key, v)?,
            ("pretrain", f) => set_train(&mut self.pretrain, f, key, v)?,
            ("sft", f) => set_train(&mut self.sft, f, key, v)?,
            ("dpo", "fitb_pairs") => {
                self.fitb_pairs = match v {
                    "all" => FitbPairs::All,
                    "one" => FitbPairs::One,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected all or one, got {v:?}"
                        )))
                    }
                }
            }
            ("dpo", f) => set_train(&mut self.dpo, f, key, v)?,
            ("train", f) => {
                set_train(&mut self.sft, f, key, v)?;
                set_train(&mut self.dpo, f, key, v)?;
            }
            ("eval", "scoring") => {
                self.scoring = match v {
                    "mean" => FitbScoring::Mean,
                    "sum" => FitbScoring::Sum,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected mean or sum, got {v:?}"
                        )))
                    }
                }
            }
            ("data", "dir") => self.data.dir = PathBuf::from(v),
            ("data", "out") => self.data.out = PathBuf::from(v),
            ("data", "synth_outfits") => self.data.synth_outfits = parse(key, v)?,
            ("data", "sample_outfits") => self.data.sample_outfits = parse(key, v)?,
            ("data", "cp_negative_ratio") => self.data.cp_negative_ratio = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Builds a config from flat `key = value` text. The preset (from
    /// `preset_override`, else the file's `preset` key, else desk) expands first;
    /// the remaining keys then apply in file order.
    pub fn from_text(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    n + 1
                ))
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let file_preset = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.parse())
            .transpose()?;
        let preset = preset_override.or(file_preset).unwrap_or(Preset::Desk);
        let mut cfg = Self::preset(preset);
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("preset".to_string(), self.preset.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        let m = &self.model;
        for (k, v) in [
            ("d_model", m.d_model),
            ("n_layers", m.n_layers),
            ("n_heads", m.n_heads),
            ("n_kv_heads", m.n_kv_heads),
            ("window", m.window),
            ("d_ff", m.d_ff),
            ("max_seq", m.max_seq),
        ] {
            out.push((format!("model.{k}"), v.to_string()));
        }
        out.push(("lora.rank".into(), self.lora.rank.to_string()));
        out.push(("lora.alpha".into(), format!("{:?}", self.lora.alpha)));
        out.push(("lora.init_std".into(), format!("{:?}", self.lora.init_std)));
        let targets: Vec<&str> = self.lora.targets.iter().map(|p| p.name()).collect();
        out.push(("lora.targets".into(), targets.join(",")));
        out.push(("pretrain.docs".into(), self.pretrain_docs.to_string()));
        for (stage, cfg) in [
            ("pretrain", &self.pretrain),
            ("sft", &self.sft),
            ("dpo", &self.dpo),
        ] {
            for f in TRAIN_KEYS {
                out.push((format!("{stage}.{f}"), get_train(cfg, f)));
            }
        }
        let pairs = match self.fitb_pairs {
            FitbPairs::All => "all",
            FitbPairs::One => "one",
        };
        out.push(("dpo.fitb_pairs".into(), pairs.into()));
        let scoring = match self.scoring {
            FitbScoring::Mean => "mean",
            FitbScoring::Sum => "sum",
        };
        out.push(("eval.scoring".into(), scoring.into()));
        out.push(("data.dir".into(), self.data.dir.display().to_string()));
        out.push(("data.out".into(), self.data.out.display().to_string()));
        out.push((
            "data.synth_outfits".into(),
            self.data.synth_outfits.to_string(),
        ));
        out.push((
            "data.sample_outfits".into(),
            self.data.sample_outfits.to_string(),
        ));
        out.push((
            "data.cp_negative_ratio".into(),
            format!("{:?}", self.data.cp_negative_ratio),
        ));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate_for(&self.model)?;
        for (name, cfg) in [
            ("pretrain", &self.pretrain),
            ("sft", &self.sft),
            ("dpo", &self.dpo),
        ] {
            cfg.validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if !(self.data.cp_negative_ratio > 0.0 && self.data.cp_negative_ratio.is_finite()) {
            return Err(Error::Config("data.cp_negative_ratio must be > 0".into()));
        }
        if self.data.synth_outfits < 8 {
            return Err(Error::Config("data.synth_outfits must be >= 8".into()));
        }
        Ok(())
    }

    /// Stage configs carry the run seed.
    pub fn sft_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.sft
        }
    }

    pub fn dpo_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.dpo
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain
        }
    }
}

/// A file with its SHA-256 digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Record of one command: its configuration, inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config: cfg.entries().into_iter().collect(),
            inputs: vec![],
            outputs: vec![],
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Loads a Polyvore-format corpus directory. With `data.sample_outfits > 0`
/// only that many training outfits are kept, along with the FITB questions
/// built entirely from their items. A split whose CP examples are missing or
/// were invalidated by sampling gets positives plus same-category negatives.
pub fn ingest(cfg: &RunConfig) -> Result<Corpus> {
    let mut corpus = Corpus::load(&cfg.data.dir)?;
    let mut rebuild = [false, false];
    if cfg.data.sample_outfits > 0 {
        let train: Vec<Outfit> = corpus.outfits_in(Split::Train).cloned().collect();
        if cfg.data.sample_outfits < train.len() {
            let kept = sample_outfits(&train, cfg.data.sample_outfits, cfg.seed);
            let items: BTreeSet<String> = kept
                .iter()
                .flat_map(|o| o.item_ids().map(String::from))
                .collect();
            corpus.train.fitb.retain(|f| {
                f.question_items
                    .iter()
                    .chain([&f.candidates[f.answer_index]])
                    .all(|i| items.contains(i))
            });
            corpus.outfits.retain(|o| o.split == Split::Test);
            corpus.outfits.extend(kept);
            rebuild[0] = true;
        }
    }
    for (k, split) in Split::ALL.into_iter().enumerate() {
        if rebuild[k] || corpus.tasks(split).cp.is_empty() {
            let outfits: Vec<Outfit> = corpus.outfits_in(split).cloned().collect();
            if outfits.is_empty() {
                continue;
            }
            let cp = make_cp_negatives(
                &outfits,
                cfg.data.cp_negative_ratio,
                cfg.seed.wrapping_add(k as u64),
            )?;
            match split {
                Split::Train => corpus.train.cp = cp,
                Split::Test => corpus.test.cp = cp,
            }
        }
    }
    corpus.validate()?;
    Ok(corpus)
}

/// The dense base model: random init, then next-token training on
/// task-shaped documents with random answers drawn from training items.
pub fn build_base(cfg: &RunConfig, corpus: &Corpus) -> Result<(ModelParams<f32>, TrainReport)> {
    let init = ModelParams::<f32>::init(cfg.model, cfg.seed)?;
    let pool: Vec<String> = corpus
        .outfits_in(Split::Train)
        .flat_map(|o| o.item_ids().map(String::from))
        .collect();
    let docs = pretraining_records(&pool, &corpus.captions, cfg.pretrain_docs, cfg.seed)?;
    pretrain(&docs, init, &cfg.pretrain_config())
}

pub fn run_sft(
    cfg: &RunConfig,
    corpus: &Corpus,
    base: ModelParams<f32>,
) -> Result<(Checkpoint, TrainReport)> {
    let records = sft_records(&corpus.train.fitb, &corpus.train.cp, &corpus.captions)?;
    train_sft(&records, base, &cfg.lora, &cfg.sft_config())
}

pub fn run_dpo(
    cfg: &RunConfig,
    corpus: &Corpus,
    sft: &Checkpoint,
) -> Result<(Checkpoint, TrainReport)> {
    let pairs = dpo_pairs(
        &corpus.train.fitb,
        &corpus.train.cp,
        &corpus.captions,
        cfg.fitb_pairs,
        cfg.seed,
    )?;
    train_dpo(&pairs, sft, &cfg.dpo_config())
}

/// Metrics on the test split.
pub fn run_eval<T: Scalar>(
    cfg: &RunConfig,
    corpus: &Corpus,
    net: &Network<'_, T>,
    strategy: &str,
) -> Result<MetricsReport> {
    let test = corpus.tasks(Split::Test);
    evaluate(
        net,
        &test.cp,
        &test.fitb,
        &corpus.captions,
        strategy,
        cfg.seed,
        cfg.scoring,
    )
}

/// Base → SFT → DPO, evaluating each model; rows in table order.
pub fn end_to_end(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let (base, _) = build_base(cfg, corpus)?;
    let plain = run_eval(cfg, corpus, &Network::dense(&base), PLAIN)?;
    let (sft, _) = run_sft(cfg, corpus, base)?;
    let peft = run_eval(cfg, corpus, &sft.network(), PEFT)?;
    let (dpo, _) = run_dpo(cfg, corpus, &sft)?;
    let aligned = run_eval(cfg, corpus, &dpo.network(), PEFT_DPO)?;
    Ok(vec![plain, peft, aligned])
}
