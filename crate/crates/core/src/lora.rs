//! Low-rank adapters on the attention projections.
//!
//! An adapted projection uses `W + (alpha / r) · A · B` with `W: [d, k]` frozen,
//! `A: [d, r]` and `B: [r, k]` trainable. `B` starts at zero so attaching leaves
//! the model function unchanged.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Proj};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<Proj>,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self::with_rank(4)
    }
}

impl LoraConfig {
    /// All four projections, `alpha = 2r`.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            targets: Proj::ALL.into_iter().collect(),
            init_std: 0.02,
        }
    }

    pub fn validate_for(&self, params_cfg: &crate::model::ModelConfig) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA targets must not be empty".into()));
        }
        if !(self.alpha.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config(
                "LoRA alpha must be finite and init_std non-negative".into(),
            ));
        }
        let d = params_cfg.d_model;
        for &t in &self.targets {
            let k = if matches!(t, Proj::K | Proj::V) {
                params_cfg.kv_dim()
            } else {
                d
            };
            let bound = d.min(k);
            if self.rank == 0 || self.rank >= bound {
                return Err(Error::Config(format!(
                    "LoRA rank {} must satisfy 1 <= r < min(d, k) = {bound} for {}",
                    self.rank,
                    t.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// `[d, r]`
    pub a: Tensor<T>,
    /// `[r, k]`
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters<T> {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<BTreeMap<Proj, LoraPair<T>>>,
}

impl<T: Scalar> LoraAdapters<T> {
    pub fn scale<U: Scalar>(&self) -> U {
        U::from_f64_lossy(self.alpha / self.rank as f64)
    }

    pub fn pair(&self, layer: usize, proj: Proj) -> Option<&LoraPair<T>> {
        self.layers.get(layer).and_then(|m| m.get(&proj))
    }

    pub fn tensor_name(layer: usize, proj: Proj, which: &str) -> String {
        format!("lora.layers.{layer}.{}.{which}", proj.name())
    }

    pub fn targets(&self) -> BTreeSet<Proj> {
        self.layers.iter().flat_map(|m| m.keys().copied()).collect()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, m) in self.layers.iter().enumerate() {
            for (&p, pair) in m {
                out.push((Self::tensor_name(l, p, "a"), &pair.a));
                out.push((Self::tensor_name(l, p, "b"), &pair.b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (l, m) in self.layers.iter_mut().enumerate() {
            for (&p, pair) in m.iter_mut() {
                out.push((Self::tensor_name(l, p, "a"), &mut pair.a));
                out.push((Self::tensor_name(l, p, "b"), &mut pair.b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapters<U> {
        LoraAdapters {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|(&p, pr)| {
                            (
                                p,
                                LoraPair {
                                    a: pr.a.cast(),
                                    b: pr.b.cast(),
                                },
                            )
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// `(alpha/r)·A·B` for one projection.
    pub fn delta(&self, layer: usize, proj: Proj) -> Option<Tensor<T>> {
        let pair = self.pair(layer, proj)?;
        let (d, r, k) = (pair.a.shape()[0], pair.a.shape()[1], pair.b.shape()[1]);
        let mut out = Tensor::zeros(&[d, k]);
        T::gemm(
            d,
            r,
            k,
            self.scale(),
            pair.a.data(),
            r as isize,
            1,
            pair.b.data(),
            k as isize,
            1,
            T::zero(),
            out.data_mut(),
            k as isize,
            1,
        );
        Some(out)
    }
}

/// Frozen base weights with trainable adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel<T> {
    pub base: ModelParams<T>,
    pub adapters: LoraAdapters<T>,
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn network(&self) -> crate::model::Network<'_, T> {
        crate::model::Network::new(&self.base, Some(&self.adapters))
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.param_count()
    }

    pub fn total_count(&self) -> usize {
        self.base.param_count() + self.adapters.param_count()
    }

    /// Folds the adapters into dense weights. Consumes the adapters so a delta
    /// cannot be applied twice.
    pub fn merge(self) -> ModelParams<T> {
        merge(self.base, self.adapters)
    }
}

/// Attaches fresh adapters: `A ~ N(0, init_std)`, `B = 0`.
pub fn attach<T: Scalar>(
    params: ModelParams<T>,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<AdaptedModel<T>> {
    cfg.validate_for(&params.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let layers = params
        .layers
        .iter()
        .map(|lp| {
            cfg.targets
                .iter()
                .map(|&p| {
                    let (d, k) = (lp.proj(p).shape()[0], lp.proj(p).shape()[1]);
                    let a = (0..d * cfg.rank)
                        .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                        .collect();
                    let pair = LoraPair {
                        a: Tensor::from_vec(&[d, cfg.rank], a),
                        b: Tensor::zeros(&[cfg.rank, k]),
                    };
                    (p, pair)
                })
                .collect()
        })
        .collect();
    Ok(AdaptedModel {
        base: params,
        adapters: LoraAdapters {
            rank: cfg.rank,
            alpha: cfg.alpha,
            layers,
        },
    })
}

/// Dense parameters with each adapted projection replaced by `W + (alpha/r)·A·B`.
pub fn merge<T: Scalar>(mut params: ModelParams<T>, adapters: LoraAdapters<T>) -> ModelParams<T> {
    for l in 0..params.layers.len() {
        for p in Proj::ALL {
            if let Some(delta) = adapters.delta(l, p) {
                params.layers[l].proj_mut(p).add_assign(&delta);
            }
        }
    }
    params
}
