use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Attention projection slots that LoRA may adapt.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub enum Proj {
    #[serde(rename = "wq")]
    Q,
    #[serde(rename = "wk")]
    K,
    #[serde(rename = "wv")]
    V,
    #[serde(rename = "wo")]
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    /// `[d_model, d_model]`, laid out `[in, out]` like every projection here.
    pub wq: Tensor<T>,
    /// `[d_model, kv_dim]`
    pub wk: Tensor<T>,
    /// `[d_model, kv_dim]`
    pub wv: Tensor<T>,
    /// `[d_model, d_model]`
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    /// `[d_model, d_ff]`
    pub w_gate: Tensor<T>,
    /// `[d_model, d_ff]`
    pub w_up: Tensor<T>,
    /// `[d_ff, d_model]`
    pub w_down: Tensor<T>,
}

impl<T> LayerParams<T> {
    pub fn proj(&self, p: Proj) -> &Tensor<T> {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Tensor<T> {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// Dense transformer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub tok_emb: Tensor<T>,
    /// `[max_seq, d_model]`
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// `[d_model, vocab]`
    pub lm_head: Tensor<T>,
}

pub const INIT_STD: f64 = 0.02;

impl<T: Scalar> ModelParams<T> {
    /// Gaussian(0, 0.02) weights, unit normalization gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                .collect();
            Tensor::from_vec(shape, data)
        };
        let d = config.d_model;
        let kv = config.kv_dim();
        let tok_emb = gauss(&[config.vocab, d]);
        let pos_emb = gauss(&[config.max_seq, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::filled(&[d], T::one()),
                wq: gauss(&[d, d]),
                wk: gauss(&[d, kv]),
                wv: gauss(&[d, kv]),
                wo: gauss(&[d, d]),
                mlp_norm: Tensor::filled(&[d], T::one()),
                w_gate: gauss(&[d, config.d_ff]),
                w_up: gauss(&[d, config.d_ff]),
                w_down: gauss(&[config.d_ff, d]),
            })
            .collect();
        let lm_head = gauss(&[d, config.vocab]);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::filled(&[d], T::one()),
            lm_head,
        })
    }

    /// Every tensor in canonical order with its checkpoint name.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .fields()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .fields_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// A copy with every weight zeroed, which makes all logits zero (uniform softmax).
    pub fn zeroed(&self) -> Self {
        let mut p = self.clone();
        for (_, t) in p.named_mut() {
            t.data_mut().fill(T::zero());
        }
        p
    }
}

/// Gradients keyed by tensor name; contains trainable tensors only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Adds `other` into `self`, creating entries as needed.
    pub fn accumulate(&mut self, other: &GradientSet<T>) {
        for (name, g) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.tensors.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.tensors.values_mut() {
            g.scale(factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &GradientSet<T>) -> f64 {
        assert_eq!(
            self.tensors.keys().collect::<Vec<_>>(),
            other.tensors.keys().collect::<Vec<_>>(),
            "gradient sets cover different tensors"
        );
        self.tensors
            .iter()
            .map(|(n, g)| g.max_abs_diff(&other.tensors[n]))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig {
            d_model: 32,
            n_heads: 4,
            ..ModelConfig::desk()
        };
        let a = ModelParams::<f32>::init(cfg, 5).unwrap();
        let b = ModelParams::<f32>::init(cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tok_emb.shape(), &[260, 32]);
        assert_eq!(a.layers[0].wk.shape(), &[32, 16]);
        assert!(a
            .layers
            .iter()
            .all(|l| l.attn_norm.data().iter().all(|&g| g == 1.0)));
        let c = ModelParams::<f32>::init(cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_std_is_close_to_target() {
        let p = ModelParams::<f64>::init(ModelConfig::desk(), 1).unwrap();
        let data = p.lm_head.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            n_heads: 4,
            n_kv_heads: 5,
            ..ModelConfig::desk()
        };
        assert!(ModelParams::<f32>::init(cfg, 0).is_err());
    }
}
