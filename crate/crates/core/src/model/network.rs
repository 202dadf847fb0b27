//! Forward pass with a recorded tape, and exact reverse-mode gradients.
//!
//! Block structure (pre-norm, per layer):
//!
//! ```text
//! h   = rmsnorm(x) * g_attn
//! x'  = x + attn(h Wq, h Wk, h Wv) Wo
//! h2  = rmsnorm(x') * g_mlp
//! out = x' + (silu(h2 Wg) ⊙ (h2 Wu)) Wd        silu(z) = z·sigmoid(z)
//! ```
//!
//! Attention is causal and limited to the last `window` positions; query head `h`
//! reads key/value head `h / (n_heads / n_kv_heads)`.
//!
//! A forward pass can be asked for output rows `[first_out, T)` only. Since
//! layer `l` at position `p` reads layer `l-1` on `[p - window + 1, p]`, each
//! layer is evaluated on the shortest suffix that feeds the requested rows. The
//! result is identical to slicing a full forward pass.

use std::borrow::Cow;

use super::params::{GradientSet, ModelParams, Proj};
use crate::error::{Error, Result};
use crate::lora::LoraAdapters;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

const RMS_EPS: f64 = 1e-5;

/// A model view: dense base weights plus optional LoRA adapters.
///
/// With adapters attached only the adapters are trainable; without, every
/// base tensor is.
#[derive(Clone, Copy)]
pub struct Network<'a, T> {
    pub params: &'a ModelParams<T>,
    pub lora: Option<&'a LoraAdapters<T>>,
}

struct LayerTape<T> {
    in_start: usize,
    out_start: usize,
    inv1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[n_out, n_heads, window]`; slot `j` holds the key at `lo(p) + j`.
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    h2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
    x_out: Vec<T>,
}

/// Intermediates of one forward pass, consumed by [`Network::backward`].
pub struct Tape<T> {
    ids: Vec<u32>,
    emb_start: usize,
    emb: Vec<T>,
    layers: Vec<LayerTape<T>>,
    inv_f: Vec<T>,
    h_f: Vec<T>,
    first_out: usize,
    logits: Vec<T>,
    vocab: usize,
    d_model: usize,
    n_heads: usize,
    window: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn first_out(&self) -> usize {
        self.first_out
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unnormalized logits at position `pos` (must be `>= first_out`).
    pub fn logits_row(&self, pos: usize) -> &[T] {
        let r = pos - self.first_out;
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }

    /// Logits for rows `[first_out, T)` as a `[rows, vocab]` tensor.
    pub fn logits(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.ids.len() - self.first_out, self.vocab],
            self.logits.clone(),
        )
    }

    /// Residual-stream output of `layer` at `pos`, if that position was computed.
    pub fn layer_output(&self, layer: usize, pos: usize) -> Option<&[T]> {
        let lt = &self.layers[layer];
        let d = self.d_model;
        (pos >= lt.out_start && pos < self.ids.len())
            .then(|| &lt.x_out[(pos - lt.out_start) * d..(pos - lt.out_start + 1) * d])
    }

    /// Attention weights of `head` at query `pos` in `layer`, oldest key first.
    pub fn attention_probs(&self, layer: usize, pos: usize, head: usize) -> Option<&[T]> {
        let lt = &self.layers[layer];
        if pos < lt.out_start || pos >= self.ids.len() {
            return None;
        }
        let lo = (pos + 1).saturating_sub(self.window);
        let base = ((pos - lt.out_start) * self.n_heads + head) * self.window;
        Some(&lt.probs[base..base + pos - lo + 1])
    }
}

fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], rows: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(RMS_EPS);
    let dt = T::from_usize(d).unwrap();
    let mut out = vec![T::zero(); rows * d];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / dt;
        let iv = T::one() / (ms + eps).sqrt();
        inv[r] = iv;
        for ((o, &xv), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = xv * iv * g;
        }
    }
    (out, inv)
}

/// Returns `dx`; accumulates the gain gradient into `dgain` when given.
fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    inv: &[T],
    gain: &[T],
    dy: &[T],
    rows: usize,
    d: usize,
    mut dgain: Option<&mut [T]>,
) -> Vec<T> {
    let dt = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let iv = inv[r];
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xr[j] * iv;
            }
        }
        let dot: T = (0..d).map(|j| dyr[j] * gain[j] * xr[j]).sum();
        let coef = iv * iv * iv * dot / dt;
        for j in 0..d {
            dx[r * d + j] = iv * gain[j] * dyr[j] - xr[j] * coef;
        }
    }
    dx
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

impl<'a, T: Scalar> Network<'a, T> {
    pub fn new(params: &'a ModelParams<T>, lora: Option<&'a LoraAdapters<T>>) -> Self {
        Self { params, lora }
    }

    pub fn dense(params: &'a ModelParams<T>) -> Self {
        Self { params, lora: None }
    }

    /// `W + (alpha/r)·A·B` when `proj` of `layer` is adapted, else `W` itself.
    fn weight(&self, layer: usize, proj: Proj) -> Cow<'a, Tensor<T>> {
        let base = self.params.layers[layer].proj(proj);
        match self
            .lora
            .and_then(|l| l.pair(layer, proj).map(|p| (l.scale::<T>(), p)))
        {
            Some((scale, pair)) => {
                let mut w = base.clone();
                let (din, dout) = (base.shape()[0], base.shape()[1]);
                let r = pair.a.shape()[1];
                T::gemm(
                    din,
                    r,
                    dout,
                    scale,
                    pair.a.data(),
                    r as isize,
                    1,
                    pair.b.data(),
                    dout as isize,
                    1,
                    T::one(),
                    w.data_mut(),
                    dout as isize,
                    1,
                );
                Cow::Owned(w)
            }
            None => Cow::Borrowed(base),
        }
    }

    /// Runs the model on `ids`, producing logits for positions `[first_out, T)`.
    pub fn forward(&self, ids: &[u32], first_out: usize) -> Result<Tape<T>> {
        let cfg = &self.params.config;
        let t = ids.len();
        if t > cfg.max_seq {
            return Err(Error::Length {
                len: t,
                max_seq: cfg.max_seq,
            });
        }
        if first_out >= t {
            return Err(Error::Validation(format!(
                "first output row {first_out} outside sequence of length {t}"
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        let (d, nl, w) = (cfg.d_model, cfg.n_layers, cfg.window);
        let (nh, hd, kvd, group) = (cfg.n_heads, cfg.head_dim(), cfg.kv_dim(), cfg.group_size());
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

        // starts[l] is the first position of layer l's input; starts[nl] == first_out.
        let mut starts = vec![0usize; nl + 1];
        starts[nl] = first_out;
        for l in (0..nl).rev() {
            starts[l] = starts[l + 1].saturating_sub(w - 1);
        }

        let n0 = t - starts[0];
        let mut emb = vec![T::zero(); n0 * d];
        for (r, p) in (starts[0]..t).enumerate() {
            let tok = self.params.tok_emb.row(ids[p] as usize);
            let pos = self.params.pos_emb.row(p);
            for ((e, &a), &b) in emb[r * d..(r + 1) * d].iter_mut().zip(tok).zip(pos) {
                *e = a + b;
            }
        }

        let mut layers: Vec<LayerTape<T>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let lp = &self.params.layers[l];
            let (in_s, out_s) = (starts[l], starts[l + 1]);
            let (n_in, n_out, off) = (t - in_s, t - out_s, out_s - in_s);
            let x_in: &[T] = if l == 0 { &emb } else { &layers[l - 1].x_out };

            let (h1, inv1) = rmsnorm(x_in, lp.attn_norm.data(), n_in, d);
            let (wq, wk, wv, wo) = (
                self.weight(l, Proj::Q),
                self.weight(l, Proj::K),
                self.weight(l, Proj::V),
                self.weight(l, Proj::O),
            );
            let mut q = vec![T::zero(); n_out * d];
            matmul(&h1[off * d..], wq.data(), &mut q, n_out, d, d, false);
            let mut k = vec![T::zero(); n_in * kvd];
            matmul(&h1, wk.data(), &mut k, n_in, d, kvd, false);
            let mut v = vec![T::zero(); n_in * kvd];
            matmul(&h1, wv.data(), &mut v, n_in, d, kvd, false);

            let mut probs = vec![T::zero(); n_out * nh * w];
            let mut att = vec![T::zero(); n_out * d];
            let mut scores = vec![T::zero(); w];
            for p in out_s..t {
                let lo = (p + 1).saturating_sub(w);
                let span = p - lo + 1;
                let pr = p - out_s;
                for h in 0..nh {
                    let g = h / group;
                    let qh = &q[pr * d + h * hd..pr * d + (h + 1) * hd];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores[..span].iter_mut().enumerate() {
                        let kr = lo + j - in_s;
                        let kh = &k[kr * kvd + g * hd..kr * kvd + (g + 1) * hd];
                        let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
                        *s = dot * scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                    let mut denom = T::zero();
                    for s in &mut scores[..span] {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let pbase = (pr * nh + h) * w;
                    let out = &mut att[pr * d + h * hd..pr * d + (h + 1) * hd];
                    for j in 0..span {
                        let pj = scores[j] / denom;
                        probs[pbase + j] = pj;
                        let vr = lo + j - in_s;
                        let vh = &v[vr * kvd + g * hd..vr * kvd + (g + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(vh) {
                            *o += pj * vv;
                        }
                    }
                }
            }

            let mut x_mid = x_in[off * d..].to_vec();
            matmul(&att, wo.data(), &mut x_mid, n_out, d, d, true);

            let (h2, inv2) = rmsnorm(&x_mid, lp.mlp_norm.data(), n_out, d);
            let ff = cfg.d_ff;
            let mut gate = vec![T::zero(); n_out * ff];
            matmul(&h2, lp.w_gate.data(), &mut gate, n_out, d, ff, false);
            let mut up = vec![T::zero(); n_out * ff];
            matmul(&h2, lp.w_up.data(), &mut up, n_out, d, ff, false);
            let act: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| g * sigmoid(g) * u)
                .collect();
            let mut x_out = x_mid.clone();
            matmul(&act, lp.w_down.data(), &mut x_out, n_out, ff, d, true);

            layers.push(LayerTape {
                in_start: in_s,
                out_start: out_s,
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                att,
                x_mid,
                inv2,
                h2,
                gate,
                up,
                act,
                x_out,
            });
        }

        let nf = t - first_out;
        let x_last: &[T] = &layers[nl - 1].x_out;
        let (h_f, inv_f) = rmsnorm(x_last, self.params.final_norm.data(), nf, d);
        let mut logits = vec![T::zero(); nf * cfg.vocab];
        matmul(
            &h_f,
            self.params.lm_head.data(),
            &mut logits,
            nf,
            d,
            cfg.vocab,
            false,
        );

        Ok(Tape {
            ids: ids.to_vec(),
            emb_start: starts[0],
            emb,
            layers,
            inv_f,
            h_f,
            first_out,
            logits,
            vocab: cfg.vocab,
            d_model: d,
            n_heads: nh,
            window: w,
        })
    }

    /// Full `[T, vocab]` logits.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor<T>> {
        Ok(self.forward(ids, 0)?.logits())
    }

    /// Gradients of a scalar loss given its adjoint with respect to the tape's
    /// logits (`[T - first_out, vocab]`, row-major).
    pub fn backward(&self, tape: &Tape<T>, d_logits: &[T]) -> GradientSet<T> {
        let cfg = &self.params.config;
        let t = tape.ids.len();
        let (d, nl, w, vocab) = (cfg.d_model, cfg.n_layers, cfg.window, cfg.vocab);
        let (nh, hd, kvd, group, ff) = (
            cfg.n_heads,
            cfg.head_dim(),
            cfg.kv_dim(),
            cfg.group_size(),
            cfg.d_ff,
        );
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let nf = t - tape.first_out;
        assert_eq!(
            d_logits.len(),
            nf * vocab,
            "adjoint shape does not match tape"
        );

        let dense = self.lora.is_none();
        let mut grads = GradientSet::default();
        let mut put = |name: String, shape: &[usize], data: Vec<T>| {
            grads.tensors.insert(name, Tensor::from_vec(shape, data));
        };

        let mut dh_f = vec![T::zero(); nf * d];
        matmul_nt(
            d_logits,
            self.params.lm_head.data(),
            &mut dh_f,
            nf,
            vocab,
            d,
            false,
        );
        if dense {
            let mut g = vec![T::zero(); d * vocab];
            matmul_tn(&tape.h_f, d_logits, &mut g, d, nf, vocab, false);
            put("lm_head".into(), &[d, vocab], g);
        }
        let mut dgain = dense.then(|| vec![T::zero(); d]);
        let mut dx = rmsnorm_backward(
            &tape.layers[nl - 1].x_out,
            &tape.inv_f,
            self.params.final_norm.data(),
            &dh_f,
            nf,
            d,
            dgain.as_deref_mut(),
        );
        if let Some(g) = dgain {
            put("final_norm".into(), &[d], g);
        }

        for l in (0..nl).rev() {
            let lt = &tape.layers[l];
            let lp = &self.params.layers[l];
            let (in_s, out_s) = (lt.in_start, lt.out_start);
            let (n_in, n_out, off) = (t - in_s, t - out_s, out_s - in_s);
            let x_in: &[T] = if l == 0 {
                &tape.emb
            } else {
                &tape.layers[l - 1].x_out
            };
            debug_assert_eq!(dx.len(), n_out * d);

            // MLP
            let mut dact = vec![T::zero(); n_out * ff];
            matmul_nt(&dx, lp.w_down.data(), &mut dact, n_out, d, ff, false);
            if dense {
                let mut g = vec![T::zero(); ff * d];
                matmul_tn(&lt.act, &dx, &mut g, ff, n_out, d, false);
                put(format!("layers.{l}.w_down"), &[ff, d], g);
            }
            let mut dgate = vec![T::zero(); n_out * ff];
            let mut dup = vec![T::zero(); n_out * ff];
            for i in 0..n_out * ff {
                let z = lt.gate[i];
                let s = sigmoid(z);
                dup[i] = dact[i] * z * s;
                dgate[i] = dact[i] * lt.up[i] * s * (T::one() + z * (T::one() - s));
            }
            let mut dh2 = vec![T::zero(); n_out * d];
            matmul_nt(&dgate, lp.w_gate.data(), &mut dh2, n_out, ff, d, false);
            matmul_nt(&dup, lp.w_up.data(), &mut dh2, n_out, ff, d, true);
            if dense {
                let mut g = vec![T::zero(); d * ff];
                matmul_tn(&lt.h2, &dgate, &mut g, d, n_out, ff, false);
                put(format!("layers.{l}.w_gate"), &[d, ff], g);
                let mut g = vec![T::zero(); d * ff];
                matmul_tn(&lt.h2, &dup, &mut g, d, n_out, ff, false);
                put(format!("layers.{l}.w_up"), &[d, ff], g);
            }
            let mut dgain = dense.then(|| vec![T::zero(); d]);
            let dmid_norm = rmsnorm_backward(
                &lt.x_mid,
                &lt.inv2,
                lp.mlp_norm.data(),
                &dh2,
                n_out,
                d,
                dgain.as_deref_mut(),
            );
            if let Some(g) = dgain {
                put(format!("layers.{l}.mlp_norm"), &[d], g);
            }
            let mut dx_mid = dx;
            for (a, &b) in dx_mid.iter_mut().zip(&dmid_norm) {
                *a += b;
            }

            // attention output projection
            let (wq, wk, wv, wo) = (
                self.weight(l, Proj::Q),
                self.weight(l, Proj::K),
                self.weight(l, Proj::V),
                self.weight(l, Proj::O),
            );
            let mut datt = vec![T::zero(); n_out * d];
            matmul_nt(&dx_mid, wo.data(), &mut datt, n_out, d, d, false);
            let mut weight_grads: Vec<(Proj, Vec<T>)> = Vec::new();
            if self.wants_weight_grad(l, Proj::O) {
                let mut g = vec![T::zero(); d * d];
                matmul_tn(&lt.att, &dx_mid, &mut g, d, n_out, d, false);
                weight_grads.push((Proj::O, g));
            }

            let mut dq = vec![T::zero(); n_out * d];
            let mut dk = vec![T::zero(); n_in * kvd];
            let mut dv = vec![T::zero(); n_in * kvd];
            let mut dp = vec![T::zero(); w];
            for p in out_s..t {
                let lo = (p + 1).saturating_sub(w);
                let span = p - lo + 1;
                let pr = p - out_s;
                for h in 0..nh {
                    let g = h / group;
                    let pbase = (pr * nh + h) * w;
                    let probs = &lt.probs[pbase..pbase + span];
                    let da = &datt[pr * d + h * hd..pr * d + (h + 1) * hd];
                    let mut weighted = T::zero();
                    for j in 0..span {
                        let vr = lo + j - in_s;
                        let vh = &lt.v[vr * kvd + g * hd..vr * kvd + (g + 1) * hd];
                        dp[j] = da.iter().zip(vh).map(|(&a, &b)| a * b).sum();
                        weighted += probs[j] * dp[j];
                        let dvh = &mut dv[vr * kvd + g * hd..vr * kvd + (g + 1) * hd];
                        for (o, &a) in dvh.iter_mut().zip(da) {
                            *o += probs[j] * a;
                        }
                    }
                    let qh = &lt.q[pr * d + h * hd..pr * d + (h + 1) * hd];
                    for j in 0..span {
                        let ds = probs[j] * (dp[j] - weighted) * scale;
                        let kr = lo + j - in_s;
                        let kh = &lt.k[kr * kvd + g * hd..kr * kvd + (g + 1) * hd];
                        let dqh = &mut dq[pr * d + h * hd..pr * d + (h + 1) * hd];
                        for (o, &kv) in dqh.iter_mut().zip(kh) {
                            *o += ds * kv;
                        }
                        let dkh = &mut dk[kr * kvd + g * hd..kr * kvd + (g + 1) * hd];
                        for (o, &qv) in dkh.iter_mut().zip(qh) {
                            *o += ds * qv;
                        }
                    }
                }
            }

            let mut dh1 = vec![T::zero(); n_in * d];
            matmul_nt(&dk, wk.data(), &mut dh1, n_in, kvd, d, false);
            matmul_nt(&dv, wv.data(), &mut dh1, n_in, kvd, d, true);
            matmul_nt(&dq, wq.data(), &mut dh1[off * d..], n_out, d, d, true);
            if self.wants_weight_grad(l, Proj::Q) {
                let mut g = vec![T::zero(); d * d];
                matmul_tn(&lt.h1[off * d..], &dq, &mut g, d, n_out, d, false);
                weight_grads.push((Proj::Q, g));
            }
            if self.wants_weight_grad(l, Proj::K) {
                let mut g = vec![T::zero(); d * kvd];
                matmul_tn(&lt.h1, &dk, &mut g, d, n_in, kvd, false);
                weight_grads.push((Proj::K, g));
            }
            if self.wants_weight_grad(l, Proj::V) {
                let mut g = vec![T::zero(); d * kvd];
                matmul_tn(&lt.h1, &dv, &mut g, d, n_in, kvd, false);
                weight_grads.push((Proj::V, g));
            }
            for (proj, g) in weight_grads {
                let shape = lp.proj(proj).shape().to_vec();
                match self.lora {
                    None => put(format!("layers.{l}.{}", proj.name()), &shape, g),
                    Some(lora) => {
                        let pair = lora
                            .pair(l, proj)
                            .expect("weight grad requested for adapted projection");
                        let s = lora.scale::<T>();
                        let (din, dout) = (shape[0], shape[1]);
                        let r = pair.a.shape()[1];
                        let mut ga = vec![T::zero(); din * r];
                        matmul_nt(&g, pair.b.data(), &mut ga, din, dout, r, false);
                        ga.iter_mut().for_each(|v| *v *= s);
                        let mut gb = vec![T::zero(); r * dout];
                        matmul_tn(pair.a.data(), &g, &mut gb, r, din, dout, false);
                        gb.iter_mut().for_each(|v| *v *= s);
                        put(LoraAdapters::<T>::tensor_name(l, proj, "a"), &[din, r], ga);
                        put(LoraAdapters::<T>::tensor_name(l, proj, "b"), &[r, dout], gb);
                    }
                }
            }

            let mut dgain = dense.then(|| vec![T::zero(); d]);
            let mut dx_in = rmsnorm_backward(
                x_in,
                &lt.inv1,
                lp.attn_norm.data(),
                &dh1,
                n_in,
                d,
                dgain.as_deref_mut(),
            );
            if let Some(g) = dgain {
                put(format!("layers.{l}.attn_norm"), &[d], g);
            }
            for (a, &b) in dx_in[off * d..].iter_mut().zip(&dx_mid) {
                *a += b;
            }
            dx = dx_in;
        }

        if dense {
            let mut gtok = vec![T::zero(); vocab * d];
            let mut gpos = vec![T::zero(); cfg.max_seq * d];
            for (r, p) in (tape.emb_start..t).enumerate() {
                let id = tape.ids[p] as usize;
                let row = &dx[r * d..(r + 1) * d];
                for j in 0..d {
                    gtok[id * d + j] += row[j];
                    gpos[p * d + j] += row[j];
                }
            }
            put("tok_emb".into(), &[vocab, d], gtok);
            put("pos_emb".into(), &[cfg.max_seq, d], gpos);
        }
        grads
    }

    fn wants_weight_grad(&self, layer: usize, proj: Proj) -> bool {
        match self.lora {
            None => true,
            Some(l) => l.pair(layer, proj).is_some(),
        }
    }

    /// Log-probabilities of `ids[from..]`, each conditioned on its prefix.
    ///
    /// The final token is never fed to the model, only scored.
    pub fn target_logprobs(&self, ids: &[u32], from: usize) -> Result<(Tape<T>, Vec<T>)> {
        if from == 0 || from >= ids.len() {
            return Err(Error::Validation(format!(
                "target range starts at {from} in a sequence of length {}",
                ids.len()
            )));
        }
        if ids.len() > self.params.config.max_seq {
            return Err(Error::Length {
                len: ids.len(),
                max_seq: self.params.config.max_seq,
            });
        }
        let tape = self.forward(&ids[..ids.len() - 1], from - 1)?;
        let logp = (from..ids.len())
            .map(|p| log_softmax_at(tape.logits_row(p - 1), ids[p] as usize))
            .collect();
        Ok((tape, logp))
    }

    /// Gradient of `Σ adjoint[i] · log p(ids[from + i])` for a tape produced by
    /// [`Network::target_logprobs`].
    pub fn backward_targets(
        &self,
        tape: &Tape<T>,
        ids: &[u32],
        from: usize,
        adjoints: &[T],
    ) -> GradientSet<T> {
        let vocab = self.params.config.vocab;
        assert_eq!(adjoints.len(), ids.len() - from);
        let mut dl = vec![T::zero(); adjoints.len() * vocab];
        for (i, &a) in adjoints.iter().enumerate() {
            let row = tape.logits_row(from + i - 1);
            let drow = &mut dl[i * vocab..(i + 1) * vocab];
            softmax_into(row, drow);
            for v in drow.iter_mut() {
                *v = -a * *v;
            }
            drow[ids[from + i] as usize] += a;
        }
        self.backward(tape, &dl)
    }
}

pub fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[target] - lse
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}
