use crate::error::{Error, Result};
use crate::model::{log_softmax_at, GradientSet, Network, Tape};
use crate::promptgen::PreferencePair;
use crate::tensor::Scalar;
use crate::tokenizer::{encode, frame, Framed};

/// Masked next-token NLL of one framed sequence: `(Σ nll, #masked, ∇Σ nll)`.
pub fn sft_sums<T: Scalar>(
    net: &Network<'_, T>,
    framed: &Framed,
) -> Result<(T, usize, GradientSet<T>)> {
    let Some(from) = framed.mask.iter().position(|&m| m == 1) else {
        return Ok((T::zero(), 0, GradientSet::default()));
    };
    if from == 0 || framed.mask[from..].iter().any(|&m| m != 1) {
        return Err(Error::Validation(
            "loss mask must be a contiguous suffix after position 0".into(),
        ));
    }
    let (tape, logp) = net.target_logprobs(&framed.ids, from)?;
    let count = logp.len();
    let nll = -logp.into_iter().sum::<T>();
    let grads = net.backward_targets(&tape, &framed.ids, from, &vec![-T::one(); count]);
    Ok((nll, count, grads))
}

/// Mean NLL over all masked positions of the batch, with its gradient.
pub fn sft_loss<T: Scalar>(net: &Network<'_, T>, batch: &[Framed]) -> Result<(T, GradientSet<T>)> {
    let mut total = T::zero();
    let mut count = 0usize;
    let mut grads = GradientSet::default();
    for f in batch {
        let (nll, n, g) = sft_sums(net, f)?;
        total += nll;
        count += n;
        grads.accumulate(&g);
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = T::one() / T::from_f64_lossy(count as f64);
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Scalar pieces of the preference loss `−log σ(Δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoTerms {
    pub loss: f64,
    /// `β[(π_c − ref_c) − (π_r − ref_r)]`
    pub delta: f64,
    /// `∂loss/∂π_c = −β·σ(−Δ)`; `∂loss/∂π_r` is its negation.
    pub d_chosen: f64,
}

pub fn dpo_terms(
    pol_chosen: f64,
    pol_rejected: f64,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> DpoTerms {
    let delta = beta * ((pol_chosen - ref_chosen) - (pol_rejected - ref_rejected));
    DpoTerms {
        loss: softplus(-delta),
        delta,
        d_chosen: -beta * sigmoid(-delta),
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Token ids of a preference triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl From<&PreferencePair> for EncodedPair {
    fn from(p: &PreferencePair) -> Self {
        Self {
            prompt: encode(&p.prompt),
            chosen: encode(&p.chosen),
            rejected: encode(&p.rejected),
        }
    }
}

/// Scored ids (`[BOS] prompt [SEP] completion`) and the first scored position.
fn scored(prompt: &[u32], completion: &[u32]) -> (Vec<u32>, usize) {
    let mut f = frame(prompt, completion);
    let start = f.completion_start();
    f.ids.pop();
    (f.ids, start)
}

struct Scored<T> {
    tape: Tape<T>,
    ids: Vec<u32>,
    from: usize,
    logp: T,
}

impl<T: Scalar> Scored<T> {
    fn run(net: &Network<'_, T>, prompt: &[u32], completion: &[u32]) -> Result<Option<Self>> {
        if completion.is_empty() {
            return Ok(None);
        }
        let (ids, from) = scored(prompt, completion);
        let (tape, logp) = net.target_logprobs(&ids, from)?;
        Ok(Some(Self {
            tape,
            ids,
            from,
            logp: logp.into_iter().sum(),
        }))
    }

    fn logp(s: &Option<Self>) -> f64 {
        s.as_ref().map_or(0.0, |s| s.logp.as_f64())
    }

    fn grads(s: &Option<Self>, net: &Network<'_, T>, adjoint: T) -> GradientSet<T> {
        match s {
            Some(s) => net.backward_targets(
                &s.tape,
                &s.ids,
                s.from,
                &vec![adjoint; s.ids.len() - s.from],
            ),
            None => GradientSet::default(),
        }
    }
}

/// Both completions are one token: a single forward scores both at the same row.
fn single_token(pair: &EncodedPair) -> Option<(u32, u32)> {
    match (pair.chosen.as_slice(), pair.rejected.as_slice()) {
        (&[c], &[r]) => Some((c, r)),
        _ => None,
    }
}

fn shared_row<T: Scalar>(
    net: &Network<'_, T>,
    pair: &EncodedPair,
    c: u32,
    r: u32,
) -> Result<(Tape<T>, f64, f64)> {
    let (ids, from) = scored(&pair.prompt, &[c]);
    let (tape, logp) = net.target_logprobs(&ids, from)?;
    let rejected = log_softmax_at(tape.logits_row(from - 1), r as usize);
    Ok((tape, logp[0].as_f64(), rejected.as_f64()))
}

/// `(log π(chosen|x), log π(rejected|x))`.
pub fn pair_logps<T: Scalar>(net: &Network<'_, T>, pair: &EncodedPair) -> Result<(f64, f64)> {
    if let Some((c, r)) = single_token(pair) {
        let (_, lc, lr) = shared_row(net, pair, c, r)?;
        return Ok((lc, lr));
    }
    let c = Scored::run(net, &pair.prompt, &pair.chosen)?;
    let r = Scored::run(net, &pair.prompt, &pair.rejected)?;
    Ok((Scored::logp(&c), Scored::logp(&r)))
}

/// Preference loss against precomputed reference log-probabilities, with the
/// gradient for the policy's trainables.
pub fn dpo_loss_with_reference<T: Scalar>(
    policy: &Network<'_, T>,
    pair: &EncodedPair,
    reference: (f64, f64),
    beta: f64,
) -> Result<(DpoTerms, GradientSet<T>)> {
    if let Some((c, r)) = single_token(pair) {
        let (tape, lc, lr) = shared_row(policy, pair, c, r)?;
        let terms = dpo_terms(lc, lr, reference.0, reference.1, beta);
        // softmax terms of the two log-probabilities cancel
        let dc = T::from_f64_lossy(terms.d_chosen);
        let vocab = policy.params.config.vocab;
        let mut dl = vec![T::zero(); vocab];
        dl[c as usize] += dc;
        dl[r as usize] -= dc;
        return Ok((terms, policy.backward(&tape, &dl)));
    }
    let c = Scored::run(policy, &pair.prompt, &pair.chosen)?;
    let r = Scored::run(policy, &pair.prompt, &pair.rejected)?;
    let terms = dpo_terms(
        Scored::logp(&c),
        Scored::logp(&r),
        reference.0,
        reference.1,
        beta,
    );
    let dc = T::from_f64_lossy(terms.d_chosen);
    let mut grads = Scored::grads(&c, policy, dc);
    grads.accumulate(&Scored::grads(&r, policy, -dc));
    Ok((terms, grads))
}

/// `−log σ(Δ)` for one pair; gradients flow to the policy only.
pub fn dpo_loss<T: Scalar>(
    policy: &Network<'_, T>,
    reference: &Network<'_, T>,
    pair: &PreferencePair,
    beta: f64,
) -> Result<(T, GradientSet<T>)> {
    let enc = EncodedPair::from(pair);
    let refs = pair_logps(reference, &enc)?;
    let (terms, grads) = dpo_loss_with_reference(policy, &enc, refs, beta)?;
    Ok((T::from_f64_lossy(terms.loss), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::promptgen::Task;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 4,
            n_kv_heads: 2,
            window: 4,
            d_ff: 32,
            max_seq: 64,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn uniform_model_loss_is_ln_vocab() {
        let params = ModelParams::<f64>::init(cfg(), 1).unwrap().zeroed();
        let net = Network::dense(&params);
        let batch = [
            frame(&encode("abc"), &encode("xy")),
            frame(&encode("q"), &encode("z")),
        ];
        let (loss, _) = sft_loss(&net, &batch).unwrap();
        assert!((loss - 260f64.ln()).abs() < 1e-12);
        assert!((260f64.ln() - 5.5607).abs() < 1e-4);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let params = ModelParams::<f64>::init(cfg(), 1).unwrap();
        let net = Network::dense(&params);
        let mut f = frame(&encode("abc"), &encode("x"));
        f.mask.iter_mut().for_each(|m| *m = 0);
        assert!(matches!(sft_loss(&net, &[f]), Err(Error::EmptyBatch)));
        assert!(matches!(sft_loss::<f64>(&net, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_has_no_prompt_target_terms() {
        // Brute-force NLL over only completion+EOS targets, from full logits.
        let params = ModelParams::<f64>::init(cfg(), 2).unwrap();
        let net = Network::dense(&params);
        let f = frame(&encode("hello"), &encode("ok"));
        let logits = net.logits(&f.ids).unwrap();
        let mut nll = 0.0;
        let mut n = 0;
        for i in 1..f.ids.len() {
            if f.mask[i] == 1 {
                nll -= crate::model::log_softmax_at(logits.row(i - 1), f.ids[i] as usize);
                n += 1;
            }
        }
        let (loss, _) = sft_loss(&net, &[f]).unwrap();
        assert_eq!(n, 3);
        assert!((loss - nll / n as f64).abs() < 1e-12);
    }

    fn pair(prompt: &str, chosen: &str, rejected: &str) -> PreferencePair {
        PreferencePair {
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            task: Task::Cp,
        }
    }

    #[test]
    fn identity_policy_gives_ln2() {
        let params = ModelParams::<f64>::init(cfg(), 3).unwrap();
        let net = Network::dense(&params);
        let (loss, _) = dpo_loss(&net, &net, &pair("outfit", "1", "0"), 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn analytic_margin_derivative_matches_finite_difference() {
        let beta = 0.1;
        for &(pc, pr, rc, rr) in &[
            (-1.0, -2.0, -1.5, -1.5),
            (-3.0, -0.5, -1.0, -2.0),
            (-10.0, -40.0, -12.0, -5.0),
        ] {
            let t = dpo_terms(pc, pr, rc, rr, beta);
            let h = 1e-5;
            let fd = (dpo_terms(pc + h, pr, rc, rr, beta).loss
                - dpo_terms(pc - h, pr, rc, rr, beta).loss)
                / (2.0 * h);
            assert!((fd - t.d_chosen).abs() / (fd.abs() + t.d_chosen.abs()) < 1e-6);
            assert!((t.d_chosen + beta * sigmoid(-t.delta)).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_at_extreme_margins() {
        let t = dpo_terms(0.0, -1e6, 0.0, 0.0, 0.1);
        assert!(t.loss >= 0.0 && t.loss < 1e-300);
        let t = dpo_terms(-1e6, 0.0, 0.0, 0.0, 0.1);
        assert!((t.loss - 1e5).abs() < 1e-6);
        assert!((t.d_chosen + 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_token_pairs_match_two_pass_scoring() {
        let params = ModelParams::<f64>::init(cfg(), 4).unwrap();
        let net = Network::dense(&params);
        let enc = EncodedPair::from(&pair("navy sporty bag, teal sporty hat", "1", "0"));
        let c = Scored::run(&net, &enc.prompt, &enc.chosen).unwrap();
        let r = Scored::run(&net, &enc.prompt, &enc.rejected).unwrap();
        let refs = (-5.0, -5.5);
        let slow = dpo_terms(Scored::logp(&c), Scored::logp(&r), refs.0, refs.1, 0.1);
        let mut slow_grads = Scored::grads(&c, &net, slow.d_chosen);
        slow_grads.accumulate(&Scored::grads(&r, &net, -slow.d_chosen));

        let (fast, fast_grads) = dpo_loss_with_reference(&net, &enc, refs, 0.1).unwrap();
        assert!((fast.loss - slow.loss).abs() < 1e-12);
        assert!((fast.delta - slow.delta).abs() < 1e-12);
        assert!(fast_grads.max_abs_diff(&slow_grads) < 1e-12);
        let (lc, lr) = pair_logps(&net, &enc).unwrap();
        assert!((lc - Scored::logp(&c)).abs() < 1e-12 && (lr - Scored::logp(&r)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_strictly_decreases_in_margin(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let l_lo = dpo_terms(lo, 0.0, 0.0, 0.0, 1.0).loss;
            let l_hi = dpo_terms(hi, 0.0, 0.0, 0.0, 1.0).loss;
            prop_assert!(l_hi <= l_lo);
            // doubling a positive chosen margin never increases the loss
            let m = a.abs();
            prop_assert!(dpo_terms(2.0 * m, 0.0, 0.0, 0.0, 0.1).loss <= dpo_terms(m, 0.0, 0.0, 0.0, 0.1).loss);
        }
    }
}
