//! AdamW, the learning-rate schedule and the EMA shadow.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::Tensor;

/// Linear warmup followed by cosine decay to `min_lr` at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { base: cfg.lr, min: cfg.min_lr, warmup: cfg.warmup_steps, total: cfg.total_steps }
    }

    /// Rate for the update taking the parameters from `step` to `step + 1`.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step as f64;
        let warmup = self.warmup as f64;
        if step < warmup {
            return self.base * (step + 1.0) / warmup;
        }
        let span = (self.total as f64 - warmup).max(1.0);
        let progress = ((step - warmup) / span).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments; values are kept on the 32-bit grid like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub state: AdamState,
}

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            state: AdamState::zeros_like(params),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    /// Parameters and moments are rounded to 32-bit floats afterwards.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let clip = if self.grad_clip > 0.0 && norm > self.grad_clip { self.grad_clip / norm } else { 1.0 };
        self.state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.state.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if g.len() != p.numel() {
                return Err(Error::Dimension(format!("gradient {k} has {} entries for {}", g.len(), p.numel())));
            }
            let m = self.state.m[k].data_mut();
            let v = self.state.v[k].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = snap(self.beta1 * m[j] + (1.0 - self.beta1) * gj);
                v[j] = snap(self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj);
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w = snap(*w * decay - lr * update);
            }
        }
        Ok(norm)
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub rate: f64,
    pub shadow: ParamStore,
}

impl Ema {
    pub fn new(rate: f64, live: &ParamStore) -> Self {
        Self { rate, shadow: live.clone() }
    }

    /// `shadow ← rate · shadow + (1 − rate) · live`, rounded to 32 bits.
    pub fn update(&mut self, live: &ParamStore) {
        for (s, l) in self.shadow.tensors_mut().iter_mut().zip(live.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(l.data()) {
                *a = snap(self.rate * *a + (1.0 - self.rate) * b);
            }
        }
    }

    /// Euclidean distance between shadow and live parameters.
    pub fn gap(&self, live: &ParamStore) -> f64 {
        self.shadow
            .tensors()
            .iter()
            .zip(live.tensors())
            .flat_map(|(s, l)| s.data().iter().zip(l.data()).map(|(a, b)| (a - b) * (a - b)))
            .sum::<f64>()
            .sqrt()
    }
}
