//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dpo_loss, sft_loss};
use crate::error::Result;
use crate::lora::LoraAdapters;
use crate::model::{GradientSet, ModelConfig, ModelParams, Network};
use crate::promptgen::{PreferencePair, Task};
use crate::tensor::Tensor;
use crate::tokenizer::{encode, frame};

/// Minimum number of sampled coordinates.
pub const MIN_COORDS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub coords: usize,
    pub max_rel_error: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst: String,
}

/// `|a − b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences on a stratified
/// random sample of trainable coordinates (adapters if present, else dense).
///
/// Every trainable tensor contributes at least a few coordinates; the total is
/// at least [`MIN_COORDS`] or all coordinates, whichever is smaller.
pub fn grad_check<F>(
    base: &mut ModelParams<f64>,
    lora: &mut Option<LoraAdapters<f64>>,
    loss: F,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Network<'_, f64>) -> Result<(f64, GradientSet<f64>)>,
{
    let analytic = loss(&Network::new(base, lora.as_ref()))?.1;
    let sizes: Vec<(String, usize)> = match lora.as_ref() {
        Some(l) => l.named().into_iter().map(|(n, t)| (n, t.len())).collect(),
        None => base
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect(),
    };
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for (name, len) in &sizes {
        let k = (MIN_COORDS * len).div_ceil(total).max(4).min(*len);
        for i in sample(&mut rng, *len, k) {
            picks.push((name.clone(), i));
        }
    }

    let mut report = GradCheckReport {
        eps,
        coords: picks.len(),
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (name, i) in picks {
        let eval = |base: &mut ModelParams<f64>,
                    lora: &mut Option<LoraAdapters<f64>>,
                    v: f64|
         -> Result<f64> {
            set(base, lora, &name, i, v);
            Ok(loss(&Network::new(base, lora.as_ref()))?.0)
        };
        let x = get(base, lora, &name, i);
        let plus = eval(base, lora, x + eps)?;
        let minus = eval(base, lora, x - eps)?;
        set(base, lora, &name, i, x);
        let numeric = (plus - minus) / (2.0 * eps);
        let g = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
        let err = relative_error(g, numeric);
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = format!("{name}[{i}]");
        }
    }
    Ok(report)
}

fn tensor_mut<'a>(
    base: &'a mut ModelParams<f64>,
    lora: &'a mut Option<LoraAdapters<f64>>,
    name: &str,
) -> &'a mut Tensor<f64> {
    let named = match lora.as_mut() {
        Some(l) => l.named_mut(),
        None => base.named_mut(),
    };
    named
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .expect("sampled tensor exists")
}

fn get(
    base: &mut ModelParams<f64>,
    lora: &mut Option<LoraAdapters<f64>>,
    name: &str,
    i: usize,
) -> f64 {
    tensor_mut(base, lora, name).data()[i]
}

fn set(
    base: &mut ModelParams<f64>,
    lora: &mut Option<LoraAdapters<f64>>,
    name: &str,
    i: usize,
    v: f64,
) {
    tensor_mut(base, lora, name).data_mut()[i] = v;
}

/// The small model used by the built-in checks: d_model 16, one layer.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 4,
        n_kv_heads: 2,
        window: 6,
        d_ff: 32,
        vocab: 260,
        max_seq: 64,
    }
}

/// Gradient check of the masked SFT loss on a dense model.
pub fn sft_check(eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut base = ModelParams::<f64>::init(check_config(), seed)?;
    let batch = [
        frame(&encode("navy boho top"), &encode("1")),
        frame(&encode("list: a, b"), &encode("red hat")),
    ];
    grad_check(&mut base, &mut None, |net| sft_loss(net, &batch), eps, seed)
}

/// Gradient check of the preference loss; the reference is an independent model.
pub fn dpo_check(eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut policy = ModelParams::<f64>::init(check_config(), seed)?;
    let reference = ModelParams::<f64>::init(check_config(), seed.wrapping_add(1))?;
    let pair = PreferencePair {
        prompt: "pick one: mint boho bag".into(),
        chosen: "pink boho hat".into(),
        rejected: "grey punk hat".into(),
        task: Task::Fitb,
    };
    // widen the margin scale so σ(−Δ) is far from its flat tails
    let beta = 0.5;
    grad_check(
        &mut policy,
        &mut None,
        |net| dpo_loss(net, &Network::dense(&reference), &pair, beta),
        eps,
        seed,
    )
}

/// Step sizes for [`eps_sweep`], coarse to fine.
pub const SWEEP_EPS: [f64; 6] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

/// One row of an epsilon sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub sft: f64,
    pub dpo: f64,
}

/// Max relative error of both built-in checks at every step in [`SWEEP_EPS`].
/// Large steps are dominated by truncation, small ones by round-off.
pub fn eps_sweep(seed: u64) -> Result<Vec<SweepPoint>> {
    SWEEP_EPS
        .iter()
        .map(|&eps| {
            Ok(SweepPoint {
                eps,
                sft: sft_check(eps, seed)?.max_rel_error,
                dpo: dpo_check(eps, seed)?.max_rel_error,
            })
        })
        .collect()
}
