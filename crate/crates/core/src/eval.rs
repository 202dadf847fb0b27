//! CP AUC and FITB accuracy, and the comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionMap, CpExample, FitbExample};
use crate::error::{Error, Result};
use crate::model::{completion_token_logprobs, next_token_logprobs, Network};
use crate::promptgen::{cp_prompt, fitb_prompt};
use crate::tensor::Scalar;
use crate::tokenizer::encode;

/// `exp(a) / (exp(a) + exp(b))`, shifted by the larger exponent.
pub fn two_way_probability(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    ea / (ea + eb)
}

/// Probability mass of `"1"` relative to `"0"` as the first completion token.
pub fn cp_score<T: Scalar>(
    net: &Network<'_, T>,
    example: &CpExample,
    captions: &CaptionMap,
) -> Result<f64> {
    let prompt = encode(&cp_prompt(example, captions)?);
    let row = next_token_logprobs(net, &prompt)?;
    let a = row[b'1' as usize].as_f64();
    let b = row[b'0' as usize].as_f64();
    Ok(two_way_probability(a, b))
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half. Computed from mid-ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::AucUndefined("no positive examples"));
    }
    if n_neg == 0 {
        return Err(Error::AucUndefined("no negative examples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Sum of positive mid-ranks, doubled to stay in integers.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        twice_rank_sum += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// How candidate log-likelihoods are aggregated over tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitbScoring {
    /// Mean per-token log-probability.
    #[default]
    Mean,
    /// Raw summed log-probability.
    Sum,
}

/// Per-candidate scores for one FITB question.
pub fn fitb_scores<T: Scalar>(
    net: &Network<'_, T>,
    example: &FitbExample,
    captions: &CaptionMap,
    scoring: FitbScoring,
) -> Result<Vec<f64>> {
    let prompt = encode(&fitb_prompt(example, captions)?);
    example
        .candidates
        .iter()
        .map(|id| {
            let lp = completion_token_logprobs(net, &prompt, &encode(captions.caption(id)?))?;
            let sum: f64 = lp.iter().map(|v| v.as_f64()).sum();
            Ok(match scoring {
                FitbScoring::Sum => sum,
                FitbScoring::Mean if lp.is_empty() => 0.0,
                FitbScoring::Mean => sum / lp.len() as f64,
            })
        })
        .collect()
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn fitb_choose<T: Scalar>(
    net: &Network<'_, T>,
    example: &FitbExample,
    captions: &CaptionMap,
    scoring: FitbScoring,
) -> Result<usize> {
    Ok(argmax_first(&fitb_scores(net, example, captions, scoring)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub cp_auc: Option<f64>,
    pub fitb_accuracy: Option<f64>,
    pub n_cp: usize,
    pub n_fitb: usize,
    pub n_examples: usize,
    pub seed: u64,
}

/// Scores every CP example and FITB question. Either set may be empty, not both.
pub fn evaluate<T: Scalar>(
    net: &Network<'_, T>,
    cp: &[CpExample],
    fitb: &[FitbExample],
    captions: &CaptionMap,
    strategy: &str,
    seed: u64,
    scoring: FitbScoring,
) -> Result<MetricsReport> {
    if cp.is_empty() && fitb.is_empty() {
        return Err(Error::Validation(
            "nothing to evaluate: both CP and FITB sets are empty".into(),
        ));
    }
    let cp_auc = if cp.is_empty() {
        None
    } else {
        let scores = cp
            .iter()
            .map(|e| cp_score(net, e, captions))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<u8> = cp.iter().map(|e| e.label).collect();
        Some(auc(&scores, &labels)?)
    };
    let fitb_accuracy = if fitb.is_empty() {
        None
    } else {
        let mut correct = 0usize;
        for e in fitb {
            if fitb_choose(net, e, captions, scoring)? == e.answer_index {
                correct += 1;
            }
        }
        Some(correct as f64 / fitb.len() as f64)
    };
    Ok(MetricsReport {
        strategy: strategy.to_string(),
        cp_auc,
        fitb_accuracy,
        n_cp: cp.len(),
        n_fitb: fitb.len(),
        n_examples: cp.len() + fitb.len(),
        seed,
    })
}

const MISSING: &str = "—";

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Fixed-width table, one row per report in the given order.
pub fn report(reports: &[MetricsReport]) -> String {
    let headers = ["Training Strategy", "CP AUC (%)", "FITB Accuracy (%)"];
    let name_w = reports
        .iter()
        .map(|r| r.strategy.chars().count())
        .chain([headers[0].len()])
        .max()
        .unwrap_or(0);
    let (w1, w2) = (headers[1].len(), headers[2].len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>w1$}  {:>w2$}",
        headers[0], headers[1], headers[2]
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + w1 + w2 + 4));
    for r in reports {
        let pad = name_w - r.strategy.chars().count();
        let (a, f) = (pct(r.cp_auc), pct(r.fitb_accuracy));
        // right-align by character count so the dash placeholder lines up
        let _ = writeln!(
            out,
            "{}{}  {}{}  {}{}",
            r.strategy,
            " ".repeat(pad),
            " ".repeat(w1.saturating_sub(a.chars().count())),
            a,
            " ".repeat(w2.saturating_sub(f.chars().count())),
            f
        );
    }
    out
}

pub fn report_json(reports: &[MetricsReport]) -> String {
    serde_json::to_string_pretty(reports).expect("serializable") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    /// Trapezoidal area under the ROC curve traced by descending thresholds.
    fn trapezoid_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let p = labels.iter().filter(|&&l| l == 1).count() as f64;
        let n = labels.len() as f64 - p;
        let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
        let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
        let mut k = 0;
        while k < idx.len() {
            let s = scores[idx[k]];
            while k < idx.len() && scores[idx[k]] == s {
                if labels[idx[k]] == 1 {
                    tp += 1.0
                } else {
                    fp += 1.0
                }
                k += 1;
            }
            let (tpr, fpr) = (tp / p, fp / n);
            area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
            prev_tpr = tpr;
            prev_fpr = fpr;
        }
        area
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::AucUndefined(_))
        ));
        assert!(auc(&[0.1, 0.2], &[1]).is_err());
    }

    #[test]
    fn auc_agrees_with_two_oracles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let n = rng.random_range(2..60);
            let levels = if trial % 2 == 0 { 4 } else { 1000 };
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
                .collect();
            let got = auc(&scores, &labels).unwrap();
            assert!((got - trapezoid_auc(&scores, &labels)).abs() < 1e-12);
            assert!((got - brute_force_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_way_probability_identities() {
        assert_eq!(two_way_probability(-3.0, -3.0), 0.5);
        assert!((two_way_probability(9f64.ln(), 0.0) - 0.9).abs() < 1e-15);
        assert!(
            (two_way_probability(-2.0, -5.0) + two_way_probability(-5.0, -2.0) - 1.0).abs() < 1e-15
        );
        let p = two_way_probability(-1e4, 0.0);
        assert!(p >= 0.0 && p.is_finite());
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            max_seq: 1024,
            window: 64,
            ..ModelConfig::tiny()
        }
    }

    fn corpus() -> crate::corpus::Corpus {
        crate::corpus::synth_corpus(20, 1).unwrap()
    }

    #[test]
    fn cp_score_matches_sequence_logprob() {
        let c = corpus();
        let params = ModelParams::<f64>::init(tiny(), 1).unwrap();
        let net = Network::dense(&params);
        let ex = &c.test.cp[0];
        let prompt = encode(&cp_prompt(ex, &c.captions).unwrap());
        let a =
            crate::model::sequence_logprob(&net, &prompt, b"1".map(u32::from).as_slice()).unwrap();
        let b =
            crate::model::sequence_logprob(&net, &prompt, b"0".map(u32::from).as_slice()).unwrap();
        let s = cp_score(&net, ex, &c.captions).unwrap();
        assert!((s - a.exp() / (a.exp() + b.exp())).abs() < 1e-12);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn uniform_model_picks_first_candidate() {
        let c = corpus();
        let params = ModelParams::<f64>::init(tiny(), 1).unwrap().zeroed();
        let net = Network::dense(&params);
        for ex in &c.test.fitb {
            assert_eq!(
                fitb_choose(&net, ex, &c.captions, FitbScoring::Mean).unwrap(),
                0
            );
        }
        let ex = &c.test.cp[0];
        assert_eq!(cp_score(&net, ex, &c.captions).unwrap(), 0.5);
    }

    #[test]
    fn higher_conditional_probability_wins() {
        // Two candidates differ in one token; the oracle per-step scores decide.
        let params = ModelParams::<f64>::init(tiny(), 7).unwrap();
        let net = Network::dense(&params);
        let mut caps = CaptionMap::default();
        for (id, c) in [
            ("q", "navy boho top"),
            ("a", "red boho hat"),
            ("b", "red punk hat"),
            ("c", "x"),
            ("d", "y"),
        ] {
            caps.insert(id, c);
        }
        let ex = FitbExample {
            question_items: vec!["q".into()],
            candidates: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            answer_index: 0,
        };
        let prompt = encode(&fitb_prompt(&ex, &caps).unwrap());
        let mean_lp = |text: &str| {
            let comp = encode(text);
            let mut ids = vec![crate::tokenizer::BOS];
            ids.extend(&prompt);
            ids.push(crate::tokenizer::SEP);
            let mut total = 0.0;
            for &t in &comp {
                let logits = net.logits(&ids).unwrap();
                total += crate::model::log_softmax_at(logits.row(ids.len() - 1), t as usize);
                ids.push(t);
            }
            total / comp.len() as f64
        };
        let scores = fitb_scores(&net, &ex, &caps, FitbScoring::Mean).unwrap();
        assert!((scores[0] - mean_lp("red boho hat")).abs() < 1e-10);
        assert!((scores[1] - mean_lp("red punk hat")).abs() < 1e-10);
        // "a" and "b" differ only in the style word; the oracle decides the winner
        let winner = if mean_lp("red boho hat") > mean_lp("red punk hat") {
            0
        } else {
            1
        };
        let two = FitbExample {
            candidates: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            ..ex
        };
        let pick = fitb_choose(&net, &two, &caps, FitbScoring::Mean).unwrap();
        assert_eq!(pick, argmax_first(&scores));
        assert!(pick == winner || scores[pick] > scores[winner]);
    }

    #[test]
    fn fitb_choice_is_permutation_covariant() {
        let c = corpus();
        let params = ModelParams::<f64>::init(tiny(), 3).unwrap();
        let net = Network::dense(&params);
        for ex in c.test.fitb.iter().take(3) {
            let pick = fitb_choose(&net, ex, &c.captions, FitbScoring::Mean).unwrap();
            let mut rev = ex.clone();
            rev.candidates.reverse();
            rev.answer_index = 3 - ex.answer_index;
            assert_eq!(
                fitb_choose(&net, &rev, &c.captions, FitbScoring::Mean).unwrap(),
                3 - pick
            );
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let c = corpus();
        let params = ModelParams::<f64>::init(tiny(), 3).unwrap();
        let net = Network::dense(&params);
        let run = || {
            evaluate(
                &net,
                &c.test.cp,
                &c.test.fitb,
                &c.captions,
                "Plain",
                3,
                FitbScoring::Mean,
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.n_examples, c.test.cp.len() + c.test.fitb.len());
        assert!(evaluate(&net, &[], &[], &c.captions, "x", 0, FitbScoring::Mean).is_err());
    }

    fn row(name: &str, cp: Option<f64>, fitb: Option<f64>) -> MetricsReport {
        MetricsReport {
            strategy: name.into(),
            cp_auc: cp,
            fitb_accuracy: fitb,
            n_cp: 1,
            n_fitb: 1,
            n_examples: 2,
            seed: 0,
        }
    }

    #[test]
    fn table_rows_and_placeholders() {
        let rows = [
            row("Plain LLM", Some(0.579), Some(0.29)),
            row("PEFT LLM (LoRA)", Some(0.6227), Some(0.49)),
            row("PEFT DPO LLM", Some(0.8103), Some(0.61)),
            row("Ablation", None, Some(0.5)),
        ];
        let t = report(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert!(
            lines[2].starts_with("Plain LLM")
                && lines[2].contains("57.90")
                && lines[2].ends_with("29.00")
        );
        assert!(
            lines[3].starts_with("PEFT LLM (LoRA)")
                && lines[3].contains("62.27")
                && lines[3].ends_with("49.00")
        );
        assert!(
            lines[4].starts_with("PEFT DPO LLM")
                && lines[4].contains("81.03")
                && lines[4].ends_with("61.00")
        );
        assert!(lines[5].contains(MISSING));
        let widths: Vec<usize> = lines
            .iter()
            .filter(|l| !l.starts_with('-'))
            .map(|l| l.chars().count())
            .collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
        let back: Vec<MetricsReport> = serde_json::from_str(&report_json(&rows)).unwrap();
        assert_eq!(back, rows);
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(scores in proptest::collection::vec(0u8..20, 4..40), seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = scores.iter().map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let squashed: Vec<f64> = s.iter().map(|v| (v / 3.0).tanh()).collect();
            prop_assert!((auc(&s, &labels).unwrap() - auc(&squashed, &labels).unwrap()).abs() < 1e-12);
        }
    }
}
