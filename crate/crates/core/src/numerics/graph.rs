//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so the tape order is a topological
//! order and `backward` walks it once in reverse.

use std::sync::Arc;

use super::attention::{attention_backward, attention_forward, AttentionDims, AttentionMask};
use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<AttentionMask>,
        dims: AttentionDims,
        probs: Vec<f64>,
    },
    GatherRows { src: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    RowWeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * r));
            inv_std.push(r);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut denom = 0.0;
            for &v in row {
                let e = (v - max).exp();
                denom += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= denom;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Multi-head scaled dot-product attention over `batch` stacked
    /// sequences of `mask.len()` rows each.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Arc<AttentionMask>,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq.shape(), tk.shape()));
        }
        let width = tq.cols();
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible into {heads} heads")));
        }
        let len = mask.len();
        if len == 0 || tq.rows() % len != 0 {
            return Err(Error::Dimension(format!(
                "attention: {} rows is not a multiple of mask length {len}",
                tq.rows()
            )));
        }
        let dims = AttentionDims { batch: tq.rows() / len, heads, head_dim: width / heads };
        let (out, probs) = attention_forward(tq.data(), tk.data(), tv.data(), mask, dims);
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(t, Op::Attention { q, k, v, mask: Arc::clone(mask), dims, probs }, rg))
    }

    /// Selects rows of `src` by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Result<Var> {
        let ts = self.value(src);
        let (r, c) = (ts.rows(), ts.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= r {
                return Err(Error::Lookup(format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(ts.row(i));
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        let rg = self.rg(src);
        Ok(self.push(t, Op::GatherRows { src, index }, rg))
    }

    /// Concatenates along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", &[rows, c], t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, c, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `[start, start + len)` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > c {
            return Err(Error::Dimension(format!("slice_cols {start}+{len} exceeds {c} columns")));
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::matrix(tx.rows(), len, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `Σ_r weights[r] · Σ_c x[r, c]`, a scalar.
    pub fn row_weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.rows() {
            return Err(Error::Dimension(format!(
                "row_weighted_sum: {} weights for {} rows",
                weights.len(),
                t.rows()
            )));
        }
        let s = t
            .data()
            .chunks(t.cols())
            .zip(&weights)
            .map(|(row, w)| w * row.iter().sum::<f64>())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::RowWeightedSum { x, weights }, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lt.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, gb, true);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                let c = self.value(*x).cols();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, &d) in gb.iter_mut().zip(g) {
                        *o -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o += d * f;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(vx) {
                        let s = sigmoid(v);
                        *o += d * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &rstd) in inv_std.iter().enumerate() {
                        let gy = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let mean_g = gy.iter().sum::<f64>() / c as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (yr, gy)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dotp: f64 = yr.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gy[j] - dotp);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, mask, dims, probs } => {
                let n = node.value.numel();
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    mask,
                    *dims,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(slot) = self.slot(grads, var) {
                        add_into(slot, &d);
                    }
                }
            }
            Op::GatherRows { src, index } => {
                let c = node.value.cols();
                if let Some(gs) = self.slot(grads, *src) {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut gs[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + len], gr);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::RowWeightedSum { x, weights } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, w) in gx.chunks_mut(c).zip(weights) {
                        for o in row {
                            *o += g[0] * w;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Masked single-batch attention on plain tensors, `heads` heads.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor> {
    if q.rows() != mask.len() {
        return Err(Error::Dimension(format!(
            "mask length {} for sequence length {}",
            mask.len(),
            q.rows()
        )));
    }
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(q, k, v, &Arc::new(mask.clone()), heads)?;
    Ok(g.value(out).clone())
}
