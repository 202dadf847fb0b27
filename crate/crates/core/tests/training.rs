use outfit_align::corpus::{synth_corpus, Corpus};
use outfit_align::eval::{evaluate, FitbScoring};
use outfit_align::pipeline::{build_base, run_sft, Preset, RunConfig};
use outfit_align::promptgen::{dpo_pairs, read_jsonl, sft_records, write_jsonl, PromptRecord};
use outfit_align::train::gradcheck::{eps_sweep, SweepPoint};
use outfit_align::train::{mean_margin, train_dpo, TrainConfig};

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::preset(Preset::Desk)
    };
    cfg.pretrain_docs = 60;
    cfg.sft.epochs = 2;
    cfg
}

#[test]
fn dpo_at_lr_1e4_raises_mean_margin() {
    let corpus = synth_corpus(40, 2).unwrap();
    let cfg = small_config(2);
    let (base, _) = build_base(&cfg, &corpus).unwrap();
    let (sft, _) = run_sft(&cfg, &corpus, base).unwrap();
    let pairs = dpo_pairs(
        &corpus.train.fitb,
        &corpus.train.cp,
        &corpus.captions,
        cfg.fitb_pairs,
        2,
    )
    .unwrap();
    let dpo_cfg = TrainConfig {
        lr_max: 1e-4,
        ..cfg.dpo_config()
    };
    let (policy, _) = train_dpo(&pairs, &sft, &dpo_cfg).unwrap();
    let before = mean_margin(&sft, &sft, &pairs, dpo_cfg.beta).unwrap();
    let after = mean_margin(&policy, &sft, &pairs, dpo_cfg.beta).unwrap();
    assert_eq!(before, 0.0);
    assert!(after > before, "margin {before} -> {after}");
}

#[test]
fn gradient_error_is_v_shaped_in_step_size() {
    let points = eps_sweep(1).unwrap();
    for pick in [|p: &SweepPoint| p.sft, |p: &SweepPoint| p.dpo] {
        let errs: Vec<f64> = points.iter().map(pick).collect();
        let best = (0..errs.len())
            .min_by(|&a, &b| errs[a].total_cmp(&errs[b]))
            .unwrap();
        assert!(
            best > 0 && best < errs.len() - 1,
            "minimum at an end: {errs:?}"
        );
        assert!(
            errs[..=best].windows(2).all(|w| w[0] > w[1]),
            "truncation arm not falling: {errs:?}"
        );
        assert!(
            errs[best..].windows(2).all(|w| w[0] < w[1]),
            "round-off arm not rising: {errs:?}"
        );
    }
}

#[test]
fn corpus_and_prompts_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(30, 4).unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back, corpus);

    let records = sft_records(&back.train.fitb, &back.train.cp, &back.captions).unwrap();
    let path = dir.path().join("sft.jsonl");
    write_jsonl(&path, &records).unwrap();
    assert_eq!(read_jsonl::<PromptRecord>(&path).unwrap(), records);
}

#[test]
fn evaluation_is_deterministic() {
    let corpus = synth_corpus(30, 6).unwrap();
    let cfg = small_config(6);
    let (base, _) = build_base(&cfg, &corpus).unwrap();
    let net = outfit_align::model::Network::dense(&base);
    let run = || {
        evaluate(
            &net,
            &corpus.test.cp,
            &corpus.test.fitb,
            &corpus.captions,
            "base",
            6,
            FitbScoring::Mean,
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}
