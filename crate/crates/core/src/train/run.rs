use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dpo_loss_with_reference, pair_logps, sft_sums, EncodedPair};
use super::optim::{adamw_step, OptState};
use super::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::lora::{attach, LoraConfig};
use crate::model::{Checkpoint, GradientSet, ModelParams};
use crate::promptgen::{PreferencePair, PromptRecord};
use crate::tensor::Tensor;
use crate::tokenizer::{encode, frame, Framed};

/// Offset between the run seed and the adapter initialisation seed.
pub const LORA_SEED_OFFSET: u64 = 0x10_0A;

/// One optimizer step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub task: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub examples: usize,
    pub log: Vec<StepLog>,
    pub epoch_mean_loss: Vec<f64>,
    /// Mean preference margin Δ per epoch (preference stage only).
    pub epoch_mean_margin: Vec<f64>,
}

/// Adapter tensors when present, otherwise every dense tensor.
pub fn trainables_mut(ckpt: &mut Checkpoint) -> Vec<(String, &mut Tensor<f32>)> {
    match ckpt.lora.as_mut() {
        Some(l) => l.named_mut(),
        None => ckpt.base.named_mut(),
    }
}

/// Shuffled optimizer-step groups and the learning rate of each step.
struct Schedule {
    rng: ChaCha8Rng,
    n: usize,
    per_step: usize,
    total: usize,
    step: usize,
}

impl Schedule {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            n,
            per_step: cfg.examples_per_step(),
            total: cfg.total_steps(n),
            step: 0,
        }
    }

    fn epoch_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    fn next_lr(&mut self, cfg: &TrainConfig) -> f64 {
        self.step += 1;
        lr_at(self.step, self.total, cfg)
    }
}

fn apply(
    ckpt: &mut Checkpoint,
    opt: &mut OptState,
    grads: &GradientSet<f32>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    adamw_step(opt, trainables_mut(ckpt), grads, lr, cfg)
}

fn check_lengths(lens: impl Iterator<Item = usize>, max_seq: usize) -> Result<()> {
    for len in lens {
        if len > max_seq {
            return Err(Error::Length { len, max_seq });
        }
    }
    Ok(())
}

/// Supervised stage: attaches fresh adapters to `base` and trains them.
pub fn train_sft(
    records: &[PromptRecord],
    base: ModelParams<f32>,
    lora: &LoraConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let adapted = attach(base, lora, cfg.seed.wrapping_add(LORA_SEED_OFFSET))?;
    let mut ckpt = Checkpoint {
        base: adapted.base,
        lora: Some(adapted.adapters),
    };
    let report = train_sft_on(&mut ckpt, records, cfg)?;
    Ok((ckpt, report))
}

/// Supervised training of the checkpoint's trainables in place.
///
/// Each optimizer step averages the masked NLL over every target token of its
/// `batch · grad_accum` examples, so accumulation is equivalent to one large batch.
pub fn train_sft_on(
    ckpt: &mut Checkpoint,
    records: &[PromptRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let framed: Vec<Framed> = records
        .iter()
        .map(|r| frame(&encode(&r.prompt), &encode(&r.completion)))
        .collect();
    fit(ckpt, framed, cfg, "sft")
}

/// Dense next-token training of every tensor on whole documents (prompt and
/// completion alike): the stand-in for a pretrained base model.
pub fn pretrain(
    records: &[PromptRecord],
    base: ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainReport)> {
    let framed: Vec<Framed> = records
        .iter()
        .map(|r| {
            let mut f = frame(&encode(&r.prompt), &encode(&r.completion));
            f.mask[1..].iter_mut().for_each(|m| *m = 1);
            f
        })
        .collect();
    let mut ckpt = Checkpoint { base, lora: None };
    let report = fit(&mut ckpt, framed, cfg, "pretrain")?;
    Ok((ckpt.base, report))
}

fn fit(
    ckpt: &mut Checkpoint,
    framed: Vec<Framed>,
    cfg: &TrainConfig,
    task: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    if framed.is_empty() {
        return Err(Error::Validation(format!("no {task} records")));
    }
    check_lengths(framed.iter().map(|f| f.ids.len()), ckpt.config().max_seq)?;

    let mut sched = Schedule::new(framed.len(), cfg);
    let mut opt = OptState::default();
    let mut report = TrainReport {
        examples: framed.len(),
        ..Default::default()
    };
    for epoch in 0..cfg.epochs {
        let order = sched.epoch_order();
        let (mut epoch_nll, mut epoch_tokens) = (0.0, 0usize);
        for group in order.chunks(sched.per_step) {
            let (mut nll, mut count, mut grads) = (0.0f64, 0usize, GradientSet::default());
            {
                let net = ckpt.network();
                for &i in group {
                    let (l, n, g) = sft_sums(&net, &framed[i])?;
                    nll += l as f64;
                    count += n;
                    grads.accumulate(&g);
                }
            }
            if count == 0 {
                return Err(Error::EmptyBatch);
            }
            grads.scale(1.0 / count as f32);
            let lr = sched.next_lr(cfg);
            apply(ckpt, &mut opt, &grads, lr, cfg)?;
            epoch_nll += nll;
            epoch_tokens += count;
            report.log.push(StepLog {
                step: sched.step,
                lr,
                loss: nll / count as f64,
                task: task.into(),
            });
        }
        let mean = epoch_nll / epoch_tokens as f64;
        info!(
            "{task} epoch {}/{}: mean loss {mean:.4}",
            epoch + 1,
            cfg.epochs
        );
        report.epoch_mean_loss.push(mean);
    }
    report.steps = sched.step;
    Ok(report)
}

/// Preference stage. The reference is a frozen copy of `sft`; the policy
/// continues training the same trainables (the adapters, if any).
pub fn train_dpo(
    pairs: &[PreferencePair],
    sft: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("no preference pairs".into()));
    }
    let encoded: Vec<EncodedPair> = pairs.iter().map(EncodedPair::from).collect();
    for p in &encoded {
        if p.chosen == p.rejected {
            return Err(Error::Validation(
                "preference pair with identical chosen and rejected".into(),
            ));
        }
    }
    let max_seq = sft.config().max_seq;
    check_lengths(
        encoded
            .iter()
            .map(|p| p.prompt.len() + 3 + p.chosen.len().max(p.rejected.len())),
        max_seq,
    )?;
    let refs = reference_logps(sft, &encoded)?;

    let mut policy = sft.clone();
    let mut sched = Schedule::new(encoded.len(), cfg);
    let mut opt = OptState::default();
    let mut report = TrainReport {
        examples: encoded.len(),
        ..Default::default()
    };
    for epoch in 0..cfg.epochs {
        let order = sched.epoch_order();
        let (mut epoch_loss, mut epoch_margin) = (0.0, 0.0);
        for group in order.chunks(sched.per_step) {
            let (mut loss, mut grads) = (0.0f64, GradientSet::default());
            {
                let net = policy.network();
                for &i in group {
                    let (terms, g) = dpo_loss_with_reference(&net, &encoded[i], refs[i], cfg.beta)?;
                    loss += terms.loss;
                    epoch_margin += terms.delta;
                    grads.accumulate(&g);
                }
            }
            grads.scale(1.0 / group.len() as f32);
            let lr = sched.next_lr(cfg);
            apply(&mut policy, &mut opt, &grads, lr, cfg)?;
            epoch_loss += loss;
            report.log.push(StepLog {
                step: sched.step,
                lr,
                loss: loss / group.len() as f64,
                task: "dpo".into(),
            });
        }
        let n = encoded.len() as f64;
        info!(
            "dpo epoch {}/{}: mean loss {:.4}, mean margin {:.4}",
            epoch + 1,
            cfg.epochs,
            epoch_loss / n,
            epoch_margin / n
        );
        report.epoch_mean_loss.push(epoch_loss / n);
        report.epoch_mean_margin.push(epoch_margin / n);
    }
    report.steps = sched.step;
    Ok((policy, report))
}

/// Reference log-probabilities `(chosen, rejected)` per pair.
pub fn reference_logps(reference: &Checkpoint, pairs: &[EncodedPair]) -> Result<Vec<(f64, f64)>> {
    let net = reference.network();
    pairs.iter().map(|p| pair_logps(&net, p)).collect()
}

/// Mean preference margin Δ of `policy` against `reference` over `pairs`.
pub fn mean_margin(
    policy: &Checkpoint,
    reference: &Checkpoint,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64> {
    let encoded: Vec<EncodedPair> = pairs.iter().map(EncodedPair::from).collect();
    let refs = reference_logps(reference, &encoded)?;
    let pol = reference_logps(policy, &encoded)?;
    let sum: f64 = pol
        .iter()
        .zip(&refs)
        .map(|(p, r)| beta * ((p.0 - r.0) - (p.1 - r.1)))
        .sum();
    Ok(sum / pairs.len().max(1) as f64)
}
