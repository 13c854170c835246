//! Parameter storage and the layers shared by both transformers.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Rounds every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// True when every name and shape matches `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Places every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound(vars)
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in [`ParamStore`] registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    XavierUniform,
    Normal(f64),
}

/// Registers parameters with deterministic initial values.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_>) -> R) -> R {
        let prefix = format!("{}{name}.", self.prefix);
        let mut sub = ParamBuilder { store: self.store, rng: self.rng, prefix };
        f(&mut sub)
    }

    pub fn tensor(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(self.rng)).collect()
            }
        };
        let t = Tensor::matrix(rows, cols, data).expect("consistent shape");
        self.store.add(format!("{}{name}", self.prefix), t)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize, init: Init) -> Linear {
        self.scoped(name, |b| Linear {
            weight: b.tensor("weight", input, output, init),
            bias: Some(b.tensor("bias", 1, output, Init::Zeros)),
        })
    }

    pub fn linear_no_bias(&mut self, name: &str, input: usize, output: usize, init: Init) -> Linear {
        self.scoped(name, |b| Linear { weight: b.tensor("weight", input, output, init), bias: None })
    }
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_bias(y, p[b]),
            None => Ok(y),
        }
    }
}

/// `norm · (1 + scale) + shift`.
pub fn modulate(g: &mut Graph, normed: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.add_scalar(scale, 1.0);
    let m = g.mul(normed, s)?;
    g.add(m, shift)
}

/// Sinusoidal features of a flow time in `[0, 1]`, `dim / 2` cosines then
/// `dim / 2` sines over geometrically spaced frequencies.
pub fn timestep_features(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = tau * 1000.0;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * freq).cos();
        out[half + k] = (t * freq).sin();
    }
    out
}

/// Transformer block with attention and MLP sub-layers, both modulated by
/// AdaLN: each row gets its own `(shift, scale, gate)` pairs projected from a
/// conditioning row. Zero-initialized modulation makes a fresh block the
/// identity.
#[derive(Clone, Debug)]
pub struct AdaLnBlock {
    pub modulation: Linear,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub width: usize,
    pub heads: usize,
}

impl AdaLnBlock {
    pub fn new(b: &mut ParamBuilder<'_>, width: usize, mlp_ratio: usize, heads: usize) -> Self {
        Self {
            modulation: b.linear("modulation", width, 6 * width, Init::Zeros),
            qkv: b.linear("qkv", width, 3 * width, Init::XavierUniform),
            attn_out: b.linear("attn_out", width, width, Init::XavierUniform),
            mlp_in: b.linear("mlp_in", width, mlp_ratio * width, Init::XavierUniform),
            mlp_out: b.linear("mlp_out", mlp_ratio * width, width, Init::XavierUniform),
            width,
            heads,
        }
    }

    /// `x` is `[batch·len, width]`. `cond_act` holds already-activated
    /// conditioning rows; when `expand` is given, row `r` of `x` uses
    /// modulation row `expand[r]`, otherwise rows correspond one to one.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        cond_act: Var,
        expand: Option<&[usize]>,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let w = self.width;
        let mut m = self.modulation.forward(g, p, cond_act)?;
        if let Some(idx) = expand {
            m = g.gather_rows(m, idx.to_vec())?;
        }
        if g.value(m).rows() != g.value(x).rows() {
            return Err(Error::Conditioning(format!(
                "{} modulation rows for {} tokens",
                g.value(m).rows(),
                g.value(x).rows()
            )));
        }
        let chunk = |g: &mut Graph, i: usize| g.slice_cols(m, i * w, w);
        let (shift1, scale1, gate1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
        let (shift2, scale2, gate2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

        let n = g.layer_norm(x);
        let h = modulate(g, n, shift1, scale1)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let q = g.slice_cols(qkv, 0, w)?;
        let k = g.slice_cols(qkv, w, w)?;
        let v = g.slice_cols(qkv, 2 * w, w)?;
        let a = g.attention(q, k, v, mask, self.heads)?;
        let a = self.attn_out.forward(g, p, a)?;
        let a = g.mul(a, gate1)?;
        let x = g.add(x, a)?;

        let n = g.layer_norm(x);
        let h = modulate(g, n, shift2, scale2)?;
        let h = self.mlp_in.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.mlp_out.forward(g, p, h)?;
        let h = g.mul(h, gate2)?;
        g.add(x, h)
    }
}

/// Heads for a hidden width: one per 64 channels, at least one.
pub fn heads_for(width: usize) -> usize {
    (width / 64).max(1)
}
