//! The full policy: observation encoder, task embedding, scale-wise
//! transformer and shared flow network over one parameter store.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actionflow::{token_positions, FlowNet};
use crate::conditioning::{Observation, ObservationEncoder, TaskEmbedding};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::multiscale::{up, MultiScaleTargets, ScaleSchedule};
use crate::nn::{Bound, ParamBuilder, ParamStore};
use crate::numerics::{AttentionMask, Graph, Tensor, Var};
use crate::scalear::ScaleAr;

#[derive(Clone, Debug)]
pub struct HiFlow {
    config: ModelConfig,
    schedule: ScaleSchedule,
    tasks: TaskEmbedding,
    encoder: ObservationEncoder,
    scalear: ScaleAr,
    flow: FlowNet,
    packed_mask: Arc<AttentionMask>,
    packed_positions: Vec<usize>,
    scale_masks: Vec<Arc<AttentionMask>>,
}

impl HiFlow {
    /// Builds the model and freshly initialized parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let schedule = config.schedule()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let tasks = TaskEmbedding::new(&mut b, config.num_tasks, config.hidden);
        let encoder = ObservationEncoder::new(&mut b, config);
        let scalear = ScaleAr::new(&mut b, config, &schedule);
        let flow = FlowNet::new(&mut b, config);
        let scales = schedule.scales();
        let model = Self {
            packed_mask: Arc::new(AttentionMask::block_diagonal(scales)),
            packed_positions: scales.iter().flat_map(|&i| token_positions(i, config.chunk_len)).collect(),
            scale_masks: scales.iter().map(|&i| Arc::new(AttentionMask::full(i))).collect(),
            config: config.clone(),
            schedule,
            tasks,
            encoder,
            scalear,
            flow,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn scalear(&self) -> &ScaleAr {
        &self.scalear
    }

    pub fn flow(&self) -> &FlowNet {
        &self.flow
    }

    pub fn tasks(&self) -> &TaskEmbedding {
        &self.tasks
    }

    pub fn encoder(&self) -> &ObservationEncoder {
        &self.encoder
    }

    /// Tokens per example in the packed layout, `Σ S`.
    pub fn packed_len(&self) -> usize {
        self.scalear.layout().total_len()
    }

    /// Scale-wise conditioning over the first `coarse.len() + 1` spans,
    /// `[B · prefix_len, H]`. `coarse[k - 1]` stacks the upsampled actions of
    /// scale `k - 1` for every example.
    pub fn conditioning(&self, g: &mut Graph, p: &Bound, obs: &[Observation], coarse: &[Tensor]) -> Result<Var> {
        let c_global = self.encoder.encode(g, p, &self.tasks, obs)?;
        let ids: Vec<usize> = obs.iter().map(|o| o.task_id).collect();
        let task_tokens = self.tasks.lookup(g, p, &ids)?;
        let z = self.scalear.embed(g, p, task_tokens, coarse)?;
        self.scalear.forward(g, p, z, c_global, coarse.len() + 1)
    }

    /// Conditioning for every scale from ground-truth coarser scales, rows in
    /// the packed layout.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        p: &Bound,
        obs: &[Observation],
        targets: &[MultiScaleTargets],
    ) -> Result<Var> {
        let per_example = targets.iter().map(|t| t.iter().map(|(_, a)| a).collect()).collect();
        let coarse = self.stack_upsampled(per_example, self.schedule.len() - 1)?;
        self.conditioning(g, p, obs, &coarse)
    }

    /// Inputs for spans `1..=k`: per example, the action tensor of each
    /// coarser scale upsampled to the next scale.
    pub fn stack_upsampled(&self, per_example: Vec<Vec<&Tensor>>, k: usize) -> Result<Vec<Tensor>> {
        let scales = self.schedule.scales();
        let a = self.config.action_dim;
        (1..=k)
            .map(|j| {
                let mut data = Vec::with_capacity(per_example.len() * scales[j] * a);
                for ex in &per_example {
                    let prev = ex.get(j - 1).ok_or_else(|| Error::Layout(format!("missing scale {}", scales[j - 1])))?;
                    if prev.rows() != scales[j - 1] || prev.cols() != a {
                        return Err(Error::Layout(format!(
                            "scale {} actions have shape {:?}",
                            scales[j - 1],
                            prev.shape()
                        )));
                    }
                    data.extend_from_slice(up(prev, scales[j])?.data());
                }
                Tensor::matrix(per_example.len() * scales[j], a, data)
            })
            .collect()
    }

    /// Velocities for the packed layout: every scale of every example in one
    /// pass, attention confined to each scale's tokens.
    pub fn packed_velocity(&self, g: &mut Graph, p: &Bound, x: Var, taus: &[f64], cond: Var) -> Result<Var> {
        let batch = g.value(x).rows() / self.packed_len();
        let positions: Vec<usize> = (0..batch).flat_map(|_| self.packed_positions.iter().copied()).collect();
        self.flow.forward(g, p, x, taus, cond, &positions, &self.packed_mask)
    }

    /// Velocities for scale index `k` of a batch, `x` and `cond` holding
    /// `B · S_k` rows.
    pub fn scale_velocity(&self, g: &mut Graph, p: &Bound, x: Var, tau: f64, cond: Var, k: usize) -> Result<Var> {
        let i = self.schedule.scales()[k];
        let n = g.value(x).rows();
        if n % i != 0 {
            return Err(Error::Conditioning(format!("{n} rows is not a whole number of scale-{i} sequences")));
        }
        let positions: Vec<usize> = (0..n / i).flat_map(|_| token_positions(i, self.config.chunk_len)).collect();
        self.flow.forward(g, p, x, &vec![tau; n], cond, &positions, &self.scale_masks[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_independent_of_schedule() {
        let counts: Vec<usize> = [vec![1, 2, 4, 8], vec![1, 8], vec![8]]
            .into_iter()
            .map(|scales| {
                let cfg = ModelConfig { hidden: 16, scales, ..ModelConfig::desk() };
                HiFlow::new(&cfg, 0).unwrap().1.num_scalars()
            })
            .collect();
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[0], counts[2]);
    }

    #[test]
    fn construction_is_seeded() {
        let cfg = ModelConfig { hidden: 16, ..ModelConfig::desk() };
        let (_, a) = HiFlow::new(&cfg, 4).unwrap();
        let (_, b) = HiFlow::new(&cfg, 4).unwrap();
        let (_, c) = HiFlow::new(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.same_layout(&c));
    }
}
