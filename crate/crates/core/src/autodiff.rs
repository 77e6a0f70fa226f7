//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node propagates adjoints back through the
//! tape and returns the gradient with respect to every node created with
//! [`Graph::param`].
//!
//! Primitives work on 2-D row-major matrices (vectors are treated as a single
//! row). The set is deliberately small: it is what the toy transformer needs
//! and nothing more.
//!
//! Non-finite values do not abort the forward pass. The first primitive that
//! produces one is remembered and reported by [`Graph::value`] and
//! [`Graph::backward`] as [`Error::NumericalFailure`].

use crate::error::{Error, Result};
use crate::tensor::{Layout, ParamVector, Tensor};
use std::sync::Arc;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax { x: NodeId, causal: bool },
    LogSoftmax(NodeId),
    Log(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { x: NodeId, start: usize, len: usize },
    SliceRows { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    Pick { x: NodeId, cols: Vec<usize> },
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "multiply",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Pick { .. } => "pick",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `node`; `None` when the output
    /// does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    failure: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        if self.failure.is_none() && !value.all_finite() {
            self.failure = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(value, op, needs)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn tensor(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn dims(&self, node: NodeId) -> (usize, usize) {
        self.nodes[node.0].value.dims2()
    }

    fn data(&self, node: NodeId) -> &[f64] {
        self.nodes[node.0].value.data()
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    fn check(&self) -> Result<()> {
        match &self.failure {
            Some(p) => Err(Error::numerical(format!("primitive `{p}`"))),
            None => Ok(()),
        }
    }

    /// Scalar value of `node`.
    pub fn value(&self, node: NodeId) -> Result<f64> {
        self.check()?;
        let t = &self.nodes[node.0].value;
        if !t.is_scalar() {
            return Err(Error::contract(format!(
                "expected a scalar, node has shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        matmul_into(self.data(a), self.data(b), &mut out, n, k, m);
        self.push_op(Tensor::new(vec![n, m], out).unwrap(), Op::MatMul(a, b), &[a, b])
    }

    /// a · bᵀ with a [n, k] and b [m, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dimensions {k} vs {k2}");
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        self.push_op(Tensor::new(vec![n, m], out).unwrap(), Op::MatMulNt(a, b), &[a, b])
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        assert_eq!(ta.shape(), tb.shape(), "{} shape mismatch", op.name());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push_op(Tensor::new(shape, data).unwrap(), op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (n, m) = self.dims(a);
        assert_eq!(self.nodes[bias.0].value.len(), m, "add_row bias length");
        let (ad, bd) = (self.data(a), self.data(bias));
        let mut out = ad.to_vec();
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        debug_assert_eq!(out.len(), n * m);
        self.push_op(Tensor::new(shape, out).unwrap(), Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push_op(Tensor::new(shape, data).unwrap(), Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push_op(Tensor::new(shape, data).unwrap(), op, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Gelu(a), gelu)
    }

    /// Row-wise softmax. With `causal`, row `i` only attends to columns `0..=i`
    /// and masked entries are exactly zero.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let (n, m) = self.dims(a);
        let ad = self.data(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let width = if causal { (i + 1).min(m) } else { m };
            softmax_row(&ad[i * m..i * m + width], &mut out[i * m..i * m + width]);
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push_op(Tensor::new(shape, out).unwrap(), Op::Softmax { x: a, causal }, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (n, m) = self.dims(a);
        let ad = self.data(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &ad[i * m..(i + 1) * m];
            let lse = log_sum_exp(row);
            for (o, x) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push_op(Tensor::new(shape, out).unwrap(), Op::LogSoftmax(a), &[a])
    }

    /// Rows `ids` of `table` stacked into an [ids.len(), width] matrix.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (rows, m) = self.dims(table);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            assert!(id < rows, "embedding id {id} out of range {rows}");
            out.extend_from_slice(&td[id * m..(id + 1) * m]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push_op(Tensor::new(vec![ids.len(), m], out).unwrap(), op, &[table])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (n, m) = self.dims(x);
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        assert_eq!(gd.len(), m);
        assert_eq!(bd.len(), m);
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push_op(Tensor::new(shape, out).unwrap(), op, &[x, gain, bias])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (n, m) = self.dims(x);
        assert!(start + len <= m, "slice_cols out of range");
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xd[i * m + start..i * m + start + len]);
        }
        self.push_op(
            Tensor::new(vec![n, len], out).unwrap(),
            Op::SliceCols { x, start, len },
            &[x],
        )
    }

    /// Rows `start .. start + len` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (n, m) = self.dims(x);
        assert!(start + len <= n, "slice_rows out of range");
        let out = self.data(x)[start * m..(start + len) * m].to_vec();
        self.push_op(
            Tensor::new(vec![len, m], out).unwrap(),
            Op::SliceRows { x, start, len },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push_op(
            Tensor::new(vec![n, total], out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Vector whose entry `i` is `x[i, cols[i]]`.
    pub fn pick(&mut self, x: NodeId, cols: &[usize]) -> NodeId {
        let (n, m) = self.dims(x);
        assert_eq!(cols.len(), n, "pick needs one column per row");
        let xd = self.data(x);
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                assert!(c < m, "pick column {c} out of range {m}");
                xd[i * m + c]
            })
            .collect();
        self.push_op(
            Tensor::vector(out),
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check()?;
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!(
                        "backward through primitive `{}`",
                        self.nodes[i].op.name()
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if wants(*a) {
                    // dA = G Bᵀ
                    let bd = self.data(*b);
                    let acc = slot(grads, *a, n * k);
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            acc[i * k + p] += dot(gr, &bd[p * m..(p + 1) * m]);
                        }
                    }
                }
                if wants(*b) {
                    // dB = Aᵀ G
                    let ad = self.data(*a);
                    let acc = slot(grads, *b, k * m);
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                axpy(av, gr, &mut acc[p * m..(p + 1) * m]);
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).0;
                if wants(*a) {
                    // dA = G B
                    let bd = self.data(*b);
                    let acc = slot(grads, *a, n * k);
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv != 0.0 {
                                axpy(gv, &bd[j * k..(j + 1) * k], &mut acc[i * k..(i + 1) * k]);
                            }
                        }
                    }
                }
                if wants(*b) {
                    // dB = Gᵀ A
                    let ad = self.data(*a);
                    let acc = slot(grads, *b, m * k);
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv != 0.0 {
                                axpy(gv, &ad[i * k..(i + 1) * k], &mut acc[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        axpy(1.0, g, slot(grads, id, g.len()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(1.0, g, slot(grads, *a, g.len()));
                }
                if wants(*b) {
                    axpy(-1.0, g, slot(grads, *b, g.len()));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((o, gv), bv) in acc.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for ((o, gv), av) in acc.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let m = self.dims(*a).1;
                if wants(*a) {
                    axpy(1.0, g, slot(grads, *a, g.len()));
                }
                if wants(*bias) {
                    let acc = slot(grads, *bias, m);
                    for row in g.chunks(m) {
                        axpy(1.0, row, acc);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(*c, g, slot(grads, *a, g.len()));
                }
            }
            Op::Softmax { x, causal } => {
                if wants(*x) {
                    let (n, m) = self.dims(*x);
                    let y = node.value.data();
                    let acc = slot(grads, *x, n * m);
                    for i in 0..n {
                        let width = if *causal { (i + 1).min(m) } else { m };
                        let yr = &y[i * m..i * m + width];
                        let gr = &g[i * m..i * m + width];
                        let s = dot(yr, gr);
                        for j in 0..width {
                            acc[i * m + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if wants(*x) {
                    let (n, m) = self.dims(*x);
                    let y = node.value.data();
                    let acc = slot(grads, *x, n * m);
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        let s: f64 = gr.iter().sum();
                        for j in 0..m {
                            acc[i * m + j] += gr[j] - y[i * m + j].exp() * s;
                        }
                    }
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xd = self.data(*x);
                    let acc = slot(grads, *x, g.len());
                    for ((o, gv), xv) in acc.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let acc = slot(grads, *x, g.len());
                    for ((o, gv), yv) in acc.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xd = self.data(*x);
                    let acc = slot(grads, *x, g.len());
                    for ((o, gv), xv) in acc.iter_mut().zip(g).zip(xd) {
                        *o += gv * gelu_grad(*xv);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let (rows, m) = self.dims(*table);
                    let acc = slot(grads, *table, rows * m);
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[i * m..(i + 1) * m], &mut acc[id * m..(id + 1) * m]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, m) = self.dims(*x);
                let gd = self.data(*gain);
                if wants(*gain) {
                    let acc = slot(grads, *gain, m);
                    for i in 0..n {
                        for j in 0..m {
                            acc[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                }
                if wants(*bias) {
                    let acc = slot(grads, *bias, m);
                    for row in g.chunks(m) {
                        axpy(1.0, row, acc);
                    }
                }
                if wants(*x) {
                    let acc = slot(grads, *x, n * m);
                    let mut dxhat = vec![0.0; m];
                    for i in 0..n {
                        let xh = &xhat[i * m..(i + 1) * m];
                        for j in 0..m {
                            dxhat[j] = g[i * m + j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = dot(&dxhat, xh) / m as f64;
                        for j in 0..m {
                            acc[i * m + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if wants(*x) {
                    let (n, m) = self.dims(*x);
                    let acc = slot(grads, *x, n * m);
                    for i in 0..n {
                        axpy(
                            1.0,
                            &g[i * len..(i + 1) * len],
                            &mut acc[i * m + start..i * m + start + len],
                        );
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                if wants(*x) {
                    let (n, m) = self.dims(*x);
                    let acc = slot(grads, *x, n * m);
                    axpy(1.0, g, &mut acc[start * m..(start + len) * m]);
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.dims2().0;
                let total = node.value.dims2().1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if wants(p) {
                        let acc = slot(grads, p, n * w);
                        for i in 0..n {
                            axpy(
                                1.0,
                                &g[i * total + offset..i * total + offset + w],
                                &mut acc[i * w..(i + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Pick { x, cols } => {
                if wants(*x) {
                    let (n, m) = self.dims(*x);
                    let acc = slot(grads, *x, n * m);
                    for (i, &c) in cols.iter().enumerate() {
                        acc[i * m + c] += g[i];
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let len = nodes[x.0].value.len();
                    let acc = slot(grads, *x, len);
                    for o in acc.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }

    /// Evaluate `output` and its gradient with respect to `params`, which must
    /// be the parameter leaves in layout order.
    pub fn forward_backward(
        &self,
        output: NodeId,
        params: &[NodeId],
        layout: &Arc<Layout>,
    ) -> Result<(f64, ParamVector)> {
        let value = self.value(output)?;
        let grads = self.backward(output)?;
        if params.len() != layout.segments().len() {
            return Err(Error::contract(format!(
                "{} parameter leaves for a layout with {} segments",
                params.len(),
                layout.segments().len()
            )));
        }
        let mut flat = vec![0.0; layout.dim()];
        for (&p, seg) in params.iter().zip(layout.segments()) {
            if self.nodes[p.0].value.len() != seg.len() {
                return Err(Error::contract(format!("leaf size mismatch for segment {}", seg.name)));
            }
            if let Some(g) = grads.get(p) {
                flat[seg.range()].copy_from_slice(g);
            }
        }
        Ok((value, ParamVector::new(layout.clone(), flat)?))
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// out += a[n,k] · b[k,m]
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * m..(p + 1) * m], orow);
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: &mut Graph, v: f64) -> NodeId {
        g.param(Tensor::vector(vec![v]))
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 3.0);
        let y = g.mul(x, x);
        let y = g.sum(y);
        let layout = Arc::new(Layout::flat(1));
        let (v, grad) = g.forward_backward(y, &[x], &layout).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grad.values(), &[6.0]);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let s = g.sum(x);
        let layout = Arc::new(Layout::flat(3));
        let (v, grad) = g.forward_backward(s, &[x], &layout).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(grad.values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::ContractViolation(_))));
        assert!(matches!(g.value(y), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn nan_names_the_primitive() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0]));
        let y = g.log(x);
        let s = g.sum(y);
        match g.backward(s) {
            Err(Error::NumericalFailure { context }) => assert!(context.contains("log"), "{context}"),
            other => panic!("expected numerical failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vec![1.0, -2.0, 300.0, 0.5, 0.0, 0.0, 0.0, 0.0, -5.0, 2.0, 1.0, 7.0]).unwrap());
        for causal in [false, true] {
            let s = g.softmax(x, causal);
            let d = g.tensor(s).data().to_vec();
            for (i, row) in d.chunks(4).enumerate() {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if causal {
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![2.0]));
        let x = g.param(Tensor::vector(vec![5.0]));
        let y = g.mul(c, x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }
}
