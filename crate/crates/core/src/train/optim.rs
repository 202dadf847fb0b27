use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::GradientSet;
use crate::tensor::{Scalar, Tensor};

/// AdamW moments per trainable tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Decay applies to matrices only (rank ≥ 2), never to gains. Tensors without a
/// gradient entry are left untouched. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adamw_step<T: Scalar>(
    opt: &mut OptState,
    trainables: Vec<(String, &mut Tensor<T>)>,
    grads: &GradientSet<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in &grads.tensors {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, param) in trainables {
        let Some(g) = grads.get(&name) else { continue };
        assert_eq!(
            g.shape(),
            param.shape(),
            "gradient shape mismatch for {name}"
        );
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = opt.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
        let decay = if param.rank() >= 2 {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        for (((p, &gi), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi.as_f64();
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            *p = T::from_f64_lossy(p.as_f64() * decay - lr * update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(name: &str, t: Tensor<f64>) -> GradientSet<f64> {
        GradientSet {
            tensors: [(name.to_string(), t)].into_iter().collect(),
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::paper_sft()
        };
        let mut w = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]);
        let before = w.clone();
        let mut opt = OptState::default();
        adamw_step(
            &mut opt,
            vec![("w".into(), &mut w)],
            &grads("w", Tensor::zeros(&[2, 2])),
            0.1,
            &cfg,
        )
        .unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let cfg = TrainConfig::paper_sft();
        let mut w = Tensor::from_vec(&[1], vec![1.0f64]);
        let mut opt = OptState::default();
        adamw_step(
            &mut opt,
            vec![("w".into(), &mut w)],
            &grads("w", Tensor::from_vec(&[1], vec![1.0])),
            0.1,
            &cfg,
        )
        .unwrap();
        // bias-corrected m/√v = 1 on the first step; a rank-1 gain is not decayed
        assert!((w.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!(w.data()[0] < 1.0);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::paper_sft()
        };
        let mut mat = Tensor::from_vec(&[1, 1], vec![2.0f64]);
        let mut gain = Tensor::from_vec(&[1], vec![2.0f64]);
        let mut opt = OptState::default();
        let g = GradientSet {
            tensors: [
                ("mat".to_string(), Tensor::zeros(&[1, 1])),
                ("gain".to_string(), Tensor::zeros(&[1])),
            ]
            .into_iter()
            .collect(),
        };
        adamw_step(
            &mut opt,
            vec![("mat".into(), &mut mat), ("gain".into(), &mut gain)],
            &g,
            0.1,
            &cfg,
        )
        .unwrap();
        assert!((mat.data()[0] - 2.0 * 0.95).abs() < 1e-12);
        assert_eq!(gain.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_leaves_params() {
        let cfg = TrainConfig::paper_sft();
        let mut w = Tensor::from_vec(&[1], vec![1.0f64]);
        let mut opt = OptState::default();
        let err = adamw_step(
            &mut opt,
            vec![("layers.0.wq".into(), &mut w)],
            &grads("layers.0.wq", Tensor::from_vec(&[1], vec![f64::NAN])),
            0.1,
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layers.0.wq"));
        assert_eq!(w.data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }
}
