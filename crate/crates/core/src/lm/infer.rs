//! Tape-free forward pass, one token at a time with a key/value cache.

use super::scalar::{Dual, Scalar};
use super::{LanguageModel, LmConfig, Offsets};
use crate::autodiff::log_sum_exp;
use crate::corpus::{TokenId, BOS};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

/// Incremental decoder over a parameter slice of any scalar type.
pub struct Decoder<'a, S: Scalar> {
    cfg: &'a LmConfig,
    off: &'a Offsets,
    p: &'a [S],
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    pos: usize,
    // scratch
    h: Vec<S>,
    a: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    att: Vec<S>,
    mid: Vec<S>,
    scores: Vec<S>,
}

impl<'a, S: Scalar> Clone for Decoder<'a, S> {
    fn clone(&self) -> Self {
        Decoder {
            cfg: self.cfg,
            off: self.off,
            p: self.p,
            keys: self.keys.clone(),
            values: self.values.clone(),
            pos: self.pos,
            h: self.h.clone(),
            a: self.a.clone(),
            q: self.q.clone(),
            k: self.k.clone(),
            v: self.v.clone(),
            att: self.att.clone(),
            mid: self.mid.clone(),
            scores: self.scores.clone(),
        }
    }
}

impl<'a, S: Scalar> Decoder<'a, S> {
    pub(crate) fn with_config(cfg: &'a LmConfig, off: &'a Offsets, p: &'a [S]) -> Self {
        let d = cfg.embed_dim;
        let cap = cfg.context_length * d;
        Decoder {
            cfg,
            off,
            p,
            keys: (0..cfg.num_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..cfg.num_layers).map(|_| Vec::with_capacity(cap)).collect(),
            pos: 0,
            h: vec![S::zero(); d],
            a: vec![S::zero(); d],
            q: vec![S::zero(); d],
            k: vec![S::zero(); d],
            v: vec![S::zero(); d],
            att: vec![S::zero(); d],
            mid: vec![S::zero(); cfg.mlp_dim()],
            scores: vec![S::zero(); cfg.context_length],
        }
    }

    /// Number of tokens fed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feed one token; returns the next-token logits.
    ///
    /// Panics when the context is full.
    pub fn push(&mut self, token: TokenId) -> Vec<S> {
        let cfg = self.cfg;
        let off = self.off;
        let p = self.p;
        let d = cfg.embed_dim;
        assert!(self.pos < cfg.context_length, "context full");
        let t = token as usize;
        for j in 0..d {
            self.h[j] = p[off.tok_emb + t * d + j] + p[off.pos_emb + self.pos * d + j];
        }
        let n_ctx = self.pos + 1;
        let hd = cfg.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        for (l, lo) in off.layers.iter().enumerate() {
            layer_norm(&self.h, &p[lo.ln1_gain..lo.ln1_gain + d], &p[lo.ln1_bias..lo.ln1_bias + d], &mut self.a);
            vec_mat(&self.a, &p[lo.wq..lo.wq + d * d], d, &mut self.q);
            vec_mat(&self.a, &p[lo.wk..lo.wk + d * d], d, &mut self.k);
            vec_mat(&self.a, &p[lo.wv..lo.wv + d * d], d, &mut self.v);
            self.keys[l].extend_from_slice(&self.k);
            self.values[l].extend_from_slice(&self.v);
            let keys = &self.keys[l];
            let vals = &self.values[l];
            for head in 0..cfg.num_heads {
                let c0 = head * hd;
                let qh = &self.q[c0..c0 + hd];
                let sc = &mut self.scores[..n_ctx];
                for (j, s) in sc.iter_mut().enumerate() {
                    let kh = &keys[j * d + c0..j * d + c0 + hd];
                    *s = dot(qh, kh).scale(inv_sqrt);
                }
                softmax_in_place(sc);
                let out = &mut self.att[c0..c0 + hd];
                out.iter_mut().for_each(|o| *o = S::zero());
                for (j, &w) in sc.iter().enumerate() {
                    let vh = &vals[j * d + c0..j * d + c0 + hd];
                    for (o, &x) in out.iter_mut().zip(vh) {
                        *o += w * x;
                    }
                }
            }
            vec_mat(&self.att, &p[lo.wo..lo.wo + d * d], d, &mut self.a);
            for j in 0..d {
                self.h[j] += self.a[j];
            }
            layer_norm(&self.h, &p[lo.ln2_gain..lo.ln2_gain + d], &p[lo.ln2_bias..lo.ln2_bias + d], &mut self.a);
            let hm = cfg.mlp_dim();
            vec_mat(&self.a, &p[lo.w1..lo.w1 + d * hm], hm, &mut self.mid);
            for (m, &b) in self.mid.iter_mut().zip(&p[lo.b1..lo.b1 + hm]) {
                *m = gelu(*m + b);
            }
            vec_mat(&self.mid, &p[lo.w2..lo.w2 + hm * d], d, &mut self.a);
            for j in 0..d {
                self.h[j] += self.a[j] + p[lo.b2 + j];
            }
        }
        layer_norm(&self.h, &p[off.lnf_gain..off.lnf_gain + d], &p[off.lnf_bias..off.lnf_bias + d], &mut self.a);
        let v = cfg.vocab_size;
        let emb = &p[off.tok_emb..off.tok_emb + v * d];
        let logits = (0..v).map(|i| dot(&self.a, &emb[i * d..(i + 1) * d])).collect();
        self.pos += 1;
        logits
    }
}

impl<'a> Decoder<'a, f64> {
    pub fn new(model: &'a LanguageModel, theta: &'a [f64]) -> Self {
        Decoder::with_config(&model.config, model.offsets(), theta)
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// out[j] = Σ_i x[i] · w[i, j]; `w` is row-major [x.len(), cols].
#[inline]
fn vec_mat<S: Scalar>(x: &[S], w: &[S], cols: usize, out: &mut [S]) {
    out.iter_mut().for_each(|o| *o = S::zero());
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], out: &mut [S]) {
    let m = x.len() as f64;
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    let mean = mean.scale(1.0 / m);
    let mut var = S::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    let inv_std = S::cst(1.0) / (var.scale(1.0 / m) + S::cst(LN_EPS)).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * inv_std * gain[j] + bias[j];
    }
}

fn softmax_in_place<S: Scalar>(xs: &mut [S]) {
    let max = xs.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = S::zero();
    for x in xs.iter_mut() {
        *x = (*x - S::cst(max)).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x = *x / z;
    }
}

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let u = (x + x * x * x.scale(0.044715)).scale(GELU_C);
    x.scale(0.5) * (S::cst(1.0) + u.tanh())
}

/// log-softmax entry `target` of `logits`.
pub fn log_prob_of<S: Scalar>(logits: &[S], target: TokenId) -> S {
    let max = logits.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = S::zero();
    for &l in logits {
        z += (l - S::cst(max)).exp();
    }
    logits[target as usize] - S::cst(max) - z.ln()
}

/// Scored log-probabilities of `x` under parameters `p`, for any scalar type.
pub(crate) fn scored_log_probs_generic<S: Scalar>(cfg: &LmConfig, off: &Offsets, p: &[S], x: &[TokenId]) -> Vec<S> {
    let mut dec = Decoder::with_config(cfg, off, p);
    dec.push(BOS);
    let mut out = Vec::with_capacity(x.len().saturating_sub(1));
    for w in x.windows(2) {
        let logits = dec.push(w[0]);
        out.push(log_prob_of(&logits, w[1]));
    }
    out
}

pub fn scored_log_probs(model: &LanguageModel, theta: &[f64], x: &[TokenId]) -> Vec<f64> {
    let mut dec = Decoder::with_config(&model.config, model.offsets(), theta);
    dec.push(BOS);
    let mut out = Vec::with_capacity(x.len().saturating_sub(1));
    for w in x.windows(2) {
        let logits = dec.push(w[0]);
        let lse = log_sum_exp(&logits);
        out.push(logits[w[1] as usize] - lse);
    }
    out
}

/// Scored log-probabilities at `theta` and their directional derivatives
/// along `direction`, i.e. (P_t(θ), vᵀ∇P_t(θ)) for every scored t.
pub fn scored_log_probs_jvp(
    model: &LanguageModel,
    theta: &[f64],
    direction: &[f64],
    x: &[TokenId],
) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<Dual> = theta.iter().zip(direction).map(|(&v, &d)| Dual::new(v, d)).collect();
    let out = scored_log_probs_generic(&model.config, model.offsets(), &p, x);
    out.into_iter().map(|d| (d.v, d.d)).unzip()
}

/// Logits after each prefix: row `t` is the distribution after feeding
/// `BOS, x_1 .. x_{t+1}`, for t in 0..x.len() - 1 (i.e. the predictions that
/// the scored positions use).
pub fn prefix_logits(model: &LanguageModel, x: &[TokenId]) -> Vec<Vec<f64>> {
    let mut dec = Decoder::new(model, model.params().values());
    dec.push(BOS);
    x.iter()
        .take(x.len().saturating_sub(1))
        .map(|&t| dec.push(t))
        .collect()
}
