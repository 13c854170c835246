//! Model and optimization settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiscale::ScaleSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width `A` of one action.
    pub action_dim: usize,
    /// Width of the low-dimensional observation features.
    pub obs_dim: usize,
    pub proprio_dim: usize,
    pub num_tasks: usize,
    /// Hidden width `H` shared by the encoder and both transformers.
    pub hidden: usize,
    /// Chunk length `T`.
    pub chunk_len: usize,
    pub scales: Vec<usize>,
    /// Scale-wise transformer depth.
    pub ar_depth: usize,
    /// Flow network depth.
    pub flow_depth: usize,
    pub mlp_ratio: usize,
    pub time_embed_dim: usize,
    /// Forbid attention between tokens of the same scale (self excepted).
    pub strict_mask: bool,
    /// Learned positional embeddings in the flow network.
    pub flow_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size settings (hidden 1024).
    pub fn full() -> Self {
        Self { hidden: 1024, ar_depth: 12, flow_depth: 6, ..Self::desk() }
    }

    /// CPU-sized profile exercising every mechanism.
    pub fn desk() -> Self {
        Self {
            action_dim: 2,
            obs_dim: 4,
            proprio_dim: 2,
            num_tasks: 1,
            hidden: 128,
            chunk_len: 8,
            scales: vec![1, 2, 4, 8],
            ar_depth: 4,
            flow_depth: 3,
            mlp_ratio: 4,
            time_embed_dim: 128,
            strict_mask: false,
            flow_positional: true,
        }
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::new(self.scales.clone(), self.chunk_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let positive = [
            ("action_dim", self.action_dim),
            ("hidden", self.hidden),
            ("num_tasks", self.num_tasks),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be a positive even number".into()));
        }
        if self.hidden % crate::nn::heads_for(self.hidden) != 0 {
            return Err(Error::Config(format!("hidden width {} does not split into heads", self.hidden)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub ema_rate: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// Metrics record interval in steps.
    pub log_every: usize,
    /// Euler steps per scale at sampling time.
    pub sample_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Training settings paired with [`ModelConfig::full`].
    pub fn full() -> Self {
        Self { batch_size: 128, ema_rate: 0.9999, ..Self::desk() }
    }

    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            min_lr: 1e-6,
            warmup_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            ema_rate: 0.9999,
            total_steps: 20_000,
            seed: 0,
            log_every: 50,
            sample_steps: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::Config("ema_rate must lie in [0, 1]".into()));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("sample_steps must be at least 1".into()));
        }
        if self.lr < 0.0 || self.min_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}
