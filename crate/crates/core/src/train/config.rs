use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    pub grad_accum: usize,
    /// DPO temperature.
    pub beta: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    /// Supervised stage at the published hyperparameters.
    pub fn paper_sft() -> Self {
        Self {
            lr_max: 2e-4,
            warmup_ratio: 0.3,
            epochs: 3,
            batch: 1,
            grad_accum: 4,
            beta: 0.1,
            weight_decay: 0.01,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    /// Preference stage at the published hyperparameters.
    pub fn paper_dpo() -> Self {
        Self {
            lr_max: 1e-8,
            warmup_ratio: 0.1,
            ..Self::paper_sft()
        }
    }

    /// Supervised stage for a miniature model: adapters on a 64-wide model
    /// need a larger step and more passes than on a 7B one.
    pub fn desk_sft() -> Self {
        Self {
            lr_max: DESK_SFT_LR,
            epochs: 14,
            ..Self::paper_sft()
        }
    }

    /// 1e-8 cannot move a miniature model in a few hundred steps.
    pub fn desk_dpo() -> Self {
        Self {
            lr_max: 1e-3,
            epochs: 6,
            ..Self::paper_dpo()
        }
    }

    /// Dense next-token stage that stands in for a pretrained base.
    pub fn desk_pretrain() -> Self {
        Self {
            lr_max: 3e-3,
            warmup_ratio: 0.1,
            epochs: 1,
            ..Self::paper_sft()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return bad("train.lr_max must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("train.warmup_ratio must lie in [0, 1]");
        }
        if self.epochs == 0 || self.batch == 0 || self.grad_accum == 0 {
            return bad("train.epochs, train.batch and train.grad_accum must be >= 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("train.beta must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return bad("Adam moments must lie in [0, 1) and eps must be > 0");
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be >= 0");
        }
        Ok(())
    }

    /// Examples consumed per optimizer step.
    pub fn examples_per_step(&self) -> usize {
        self.batch * self.grad_accum
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.examples_per_step()) * self.epochs
    }
}

/// Peak SFT learning rate of the desk preset.
pub const DESK_SFT_LR: f64 = 5e-3;

/// Linear warmup to `lr_max` over `⌈warmup_ratio · total⌉` steps, then linear
/// decay to zero at `total`. The ramp always ends before the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warm = warmup_steps(total_steps, cfg.warmup_ratio);
    if warm > 0 && step <= warm {
        cfg.lr_max * step as f64 / warm as f64
    } else {
        cfg.lr_max * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

pub fn warmup_steps(total_steps: usize, ratio: f64) -> usize {
    ((ratio * total_steps as f64 - 1e-9).ceil().max(0.0) as usize)
        .min(total_steps.saturating_sub(1))
}
