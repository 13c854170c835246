//! Boolean attention masks and the fused multi-head attention kernel.
//!
//! Masked keys are skipped entirely rather than filled with `-inf`, so an
//! output row is a function of its permitted keys only. This is what makes
//! the scale-causality property hold bitwise.

use crate::error::{Error, Result};

/// `len × len` boolean matrix; `allow(q, k)` means query `q` may read key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allow: Vec<bool>,
    keys: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    nnz: usize,
}

impl AttentionMask {
    pub fn new(len: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != len * len {
            return Err(Error::Dimension(format!(
                "mask of {} entries for sequence length {len}",
                allow.len()
            )));
        }
        let mut keys = Vec::with_capacity(len);
        let mut offsets = Vec::with_capacity(len);
        let mut nnz = 0;
        for q in 0..len {
            let row: Vec<usize> = (0..len).filter(|&k| allow[q * len + k]).collect();
            if row.is_empty() {
                return Err(Error::Config(format!(
                    "attention mask row {q} permits no keys"
                )));
            }
            offsets.push(nnz);
            nnz += row.len();
            keys.push(row);
        }
        Ok(Self { len, allow, keys, offsets, nnz })
    }

    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allow = (0..len * len).map(|i| f(i / len, i % len)).collect();
        Self::new(len, allow)
    }

    pub fn full(len: usize) -> Self {
        Self::new(len, vec![true; len * len]).expect("full mask is valid")
    }

    pub fn identity(len: usize) -> Self {
        Self::from_fn(len, |q, k| q == k).expect("identity mask is valid")
    }

    /// Attention restricted to contiguous blocks given by their lengths.
    pub fn block_diagonal(block_lens: &[usize]) -> Self {
        let block_of = block_index(block_lens);
        Self::from_fn(block_of.len(), |q, k| block_of[q] == block_of[k])
            .expect("block-diagonal mask is valid")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.len + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub(crate) fn keys(&self, q: usize) -> &[usize] {
        &self.keys[q]
    }
}

pub(crate) fn block_index(block_lens: &[usize]) -> Vec<usize> {
    block_lens
        .iter()
        .enumerate()
        .flat_map(|(b, &n)| std::iter::repeat(b).take(n))
        .collect()
}

/// Shape parameters of one fused attention call: `batch` sequences of
/// `mask.len()` tokens stacked along rows, `heads` heads across columns.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionDims {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
}

/// Forward kernel. Returns the output and the retained probabilities.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &AttentionMask,
    dims: AttentionDims,
) -> (Vec<f64>, Vec<f64>) {
    let len = mask.len;
    let width = dims.heads * dims.head_dim;
    let scale = 1.0 / (dims.head_dim as f64).sqrt();
    let mut out = vec![0.0; dims.batch * len * width];
    let mut probs = vec![0.0; dims.batch * dims.heads * mask.nnz];
    let mut scores = Vec::with_capacity(len);
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let col = h * dims.head_dim;
            let pbase = (b * dims.heads + h) * mask.nnz;
            for qi in 0..len {
                let qrow = &q[(b * len + qi) * width + col..][..dims.head_dim];
                let keys = mask.keys(qi);
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for &kj in keys {
                    let krow = &k[(b * len + kj) * width + col..][..dims.head_dim];
                    let s = dot(qrow, krow) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let p = &mut probs[pbase + mask.offsets[qi]..][..keys.len()];
                let orow = &mut out[(b * len + qi) * width + col..][..dims.head_dim];
                for ((pj, &s), &kj) in p.iter_mut().zip(&scores).zip(keys) {
                    *pj = s / denom;
                    let vrow = &v[(b * len + kj) * width + col..][..dims.head_dim];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += *pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients w.r.t. q, k, v into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    mask: &AttentionMask,
    dims: AttentionDims,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let len = mask.len;
    let width = dims.heads * dims.head_dim;
    let scale = 1.0 / (dims.head_dim as f64).sqrt();
    let mut dp = Vec::with_capacity(len);
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let col = h * dims.head_dim;
            let pbase = (b * dims.heads + h) * mask.nnz;
            for qi in 0..len {
                let keys = mask.keys(qi);
                let p = &probs[pbase + mask.offsets[qi]..][..keys.len()];
                let go = &grad_out[(b * len + qi) * width + col..][..dims.head_dim];
                dp.clear();
                let mut weighted = 0.0;
                for (&kj, &pj) in keys.iter().zip(p) {
                    let vrow = &v[(b * len + kj) * width + col..][..dims.head_dim];
                    let d = dot(go, vrow);
                    weighted += pj * d;
                    dp.push(d);
                    let dvrow = &mut dv[(b * len + kj) * width + col..][..dims.head_dim];
                    for (g, &o) in dvrow.iter_mut().zip(go) {
                        *g += pj * o;
                    }
                }
                let qoff = (b * len + qi) * width + col;
                for ((&kj, &pj), &d) in keys.iter().zip(p).zip(&dp) {
                    let ds = pj * (d - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let koff = (b * len + kj) * width + col;
                    for c in 0..dims.head_dim {
                        dq[qoff + c] += ds * k[koff + c];
                        dk[koff + c] += ds * q[qoff + c];
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_row_is_rejected() {
        let err = AttentionMask::new(2, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn block_diagonal_layout() {
        let m = AttentionMask::block_diagonal(&[1, 2]);
        assert!(m.allows(0, 0));
        assert!(!m.allows(0, 1));
        assert!(m.allows(1, 2) && m.allows(2, 1));
        assert!(!m.allows(2, 0));
    }
}
