//! Differentiable forward pass on the autodiff tape.

use super::LanguageModel;
use crate::autodiff::{Graph, NodeId};
use crate::corpus::{TokenId, BOS};
use crate::tensor::Tensor;

/// Tape for one sequence.
pub struct SeqGraph {
    pub graph: Graph,
    /// Parameter leaves in layout order.
    pub params: Vec<NodeId>,
    /// Vector of the scored log-probabilities P_t.
    pub log_probs: NodeId,
}

/// Record the forward pass of `x` (length ≥ 2) under parameters `theta`.
pub fn build(model: &LanguageModel, theta: &[f64], x: &[TokenId]) -> SeqGraph {
    let cfg = model.config();
    let layout = model.params().layout();
    let mut g = Graph::new();
    let params: Vec<NodeId> = layout
        .segments()
        .iter()
        .map(|s| g.param(Tensor::new(s.shape.clone(), theta[s.range()].to_vec()).unwrap()))
        .collect();
    let p = |name: &str| params[layout.segments().iter().position(|s| s.name == name).unwrap()];

    let n = x.len();
    let mut ids = Vec::with_capacity(n);
    ids.push(BOS as usize);
    ids.extend(x[..n - 1].iter().map(|&t| t as usize));
    let positions: Vec<usize> = (0..n).collect();

    let tok = g.embedding(p("tok_emb"), &ids);
    let pos = g.embedding(p("pos_emb"), &positions);
    let mut h = g.add(tok, pos);

    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    for l in 0..cfg.num_layers {
        let q = |s: &str| format!("layer{l}.{s}");
        let a = g.layer_norm(h, p(&q("ln1.gain")), p(&q("ln1.bias")));
        let qm = g.matmul(a, p(&q("attn.wq")));
        let km = g.matmul(a, p(&q("attn.wk")));
        let vm = g.matmul(a, p(&q("attn.wv")));
        let heads: Vec<NodeId> = (0..cfg.num_heads)
            .map(|head| {
                let qh = g.slice_cols(qm, head * hd, hd);
                let kh = g.slice_cols(km, head * hd, hd);
                let vh = g.slice_cols(vm, head * hd, hd);
                let s = g.matmul_nt(qh, kh);
                let s = g.scale(s, inv_sqrt);
                let w = g.softmax(s, true);
                g.matmul(w, vh)
            })
            .collect();
        let att = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let o = g.matmul(att, p(&q("attn.wo")));
        h = g.add(h, o);

        let a = g.layer_norm(h, p(&q("ln2.gain")), p(&q("ln2.bias")));
        let m = g.matmul(a, p(&q("mlp.w1")));
        let m = g.add_row(m, p(&q("mlp.b1")));
        let m = g.gelu(m);
        let m = g.matmul(m, p(&q("mlp.w2")));
        let m = g.add_row(m, p(&q("mlp.b2")));
        h = g.add(h, m);
    }
    let hf = g.layer_norm(h, p("lnf.gain"), p("lnf.bias"));
    let scored = g.slice_rows(hf, 1, n - 1);
    let logits = g.matmul_nt(scored, p("tok_emb"));
    let lsm = g.log_softmax(logits);
    let targets: Vec<usize> = x[1..].iter().map(|&t| t as usize).collect();
    let log_probs = g.pick(lsm, &targets);
    SeqGraph {
        graph: g,
        params,
        log_probs,
    }
}

/// Σ_t P_t(θ) and its gradient.
pub fn log_likelihood_grad(
    model: &LanguageModel,
    theta: &[f64],
    x: &[TokenId],
) -> crate::error::Result<(f64, Vec<f64>)> {
    let mut sg = build(model, theta, x);
    let total = sg.graph.sum(sg.log_probs);
    let (v, grad) = sg
        .graph
        .forward_backward(total, &sg.params, model.params().layout())?;
    Ok((v, grad.into_values()))
}

/// ∇P_t(θ) for every scored position, one reverse sweep per position over a
/// shared tape.
pub fn per_token_gradients(
    model: &LanguageModel,
    theta: &[f64],
    x: &[TokenId],
) -> crate::error::Result<Vec<Vec<f64>>> {
    let mut sg = build(model, theta, x);
    let n = x.len() - 1;
    let outputs: Vec<NodeId> = (0..n)
        .map(|t| {
            let e = sg.graph.slice_cols(sg.log_probs, t, 1);
            sg.graph.sum(e)
        })
        .collect();
    outputs
        .into_iter()
        .enumerate()
        .map(|(t, out)| {
            sg.graph
                .forward_backward(out, &sg.params, model.params().layout())
                .map(|(_, g)| g.into_values())
                .map_err(|e| match e {
                    crate::error::Error::NumericalFailure { context } => {
                        crate::error::Error::numerical(format!("{context} (position {t})"))
                    }
                    other => other,
                })
        })
        .collect()
}

/// Σ_{t ≥ first} P_t(θ) over scored positions `first..`, and its gradient.
/// Scored position t predicts `x[t + 1]`.
pub fn partial_log_likelihood_grad(
    model: &LanguageModel,
    theta: &[f64],
    x: &[TokenId],
    first: usize,
) -> crate::error::Result<(f64, Vec<f64>)> {
    let n = x.len() - 1;
    if first >= n {
        return Err(crate::error::Error::invalid(format!(
            "no scored positions from {first} in a sequence of length {}",
            x.len()
        )));
    }
    let mut sg = build(model, theta, x);
    let part = sg.graph.slice_cols(sg.log_probs, first, n - first);
    let total = sg.graph.sum(part);
    let (v, grad) = sg
        .graph
        .forward_backward(total, &sg.params, model.params().layout())?;
    Ok((v, grad.into_values()))
}
