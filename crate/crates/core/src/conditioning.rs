//! Observation encoder and task embedding.
//!
//! The encoder is an MLP over low-dimensional observation features,
//! proprioception, and the task embedding; it yields the global condition
//! vector. An image backbone would replace [`ObservationEncoder`] behind the
//! same `encode` signature.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamBuilder, ParamId};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub proprio: Vec<f64>,
    pub task_id: usize,
}

/// Learnable `num_tasks × H` table; row `id` is the task token.
#[derive(Clone, Debug)]
pub struct TaskEmbedding {
    pub table: ParamId,
    pub num_tasks: usize,
}

impl TaskEmbedding {
    pub fn new(b: &mut ParamBuilder<'_>, num_tasks: usize, hidden: usize) -> Self {
        Self { table: b.tensor("task_embedding", num_tasks, hidden, Init::Normal(0.02)), num_tasks }
    }

    pub fn check(&self, task_id: usize) -> Result<()> {
        if task_id >= self.num_tasks {
            return Err(Error::Lookup(format!("task id {task_id} outside [0, {})", self.num_tasks)));
        }
        Ok(())
    }

    /// One row per entry of `ids`.
    pub fn lookup(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        for &id in ids {
            self.check(id)?;
        }
        g.gather_rows(p[self.table], ids.to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct ObservationEncoder {
    obs_in: Linear,
    task_in: Linear,
    hidden: Linear,
    out: Linear,
    obs_dim: usize,
    proprio_dim: usize,
}

impl ObservationEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        b.scoped("encoder", |b| Self {
            obs_in: b.linear("obs_in", cfg.obs_dim + cfg.proprio_dim, h, Init::XavierUniform),
            task_in: b.linear_no_bias("task_in", h, h, Init::XavierUniform),
            hidden: b.linear("hidden", h, h, Init::XavierUniform),
            out: b.linear("out", h, h, Init::XavierUniform),
            obs_dim: cfg.obs_dim,
            proprio_dim: cfg.proprio_dim,
        })
    }

    pub fn final_layer(&self) -> &Linear {
        &self.out
    }

    /// Global condition vectors `[B, H]` for a batch of observations.
    pub fn encode(&self, g: &mut Graph, p: &Bound, tasks: &TaskEmbedding, obs: &[Observation]) -> Result<Var> {
        let width = self.obs_dim + self.proprio_dim;
        let mut rows = Vec::with_capacity(obs.len() * width);
        for o in obs {
            if o.features.len() != self.obs_dim || o.proprio.len() != self.proprio_dim {
                return Err(Error::Config(format!(
                    "observation widths ({}, {}) do not match configured ({}, {})",
                    o.features.len(),
                    o.proprio.len(),
                    self.obs_dim,
                    self.proprio_dim
                )));
            }
            rows.extend_from_slice(&o.features);
            rows.extend_from_slice(&o.proprio);
        }
        let ids: Vec<usize> = obs.iter().map(|o| o.task_id).collect();
        let task = tasks.lookup(g, p, &ids)?;
        let x = g.constant(Tensor::matrix(obs.len(), width, rows)?);
        let a = self.obs_in.forward(g, p, x)?;
        let t = self.task_in.forward(g, p, task)?;
        let h = g.add(a, t)?;
        let h = g.silu(h);
        let h = self.hidden.forward(g, p, h)?;
        let h = g.silu(h);
        self.out.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(num_tasks: usize) -> (ParamStore, TaskEmbedding, ObservationEncoder) {
        let cfg = ModelConfig { hidden: 8, num_tasks, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let tasks = TaskEmbedding::new(&mut b, num_tasks, 8);
        let enc = ObservationEncoder::new(&mut b, &cfg);
        (store, tasks, enc)
    }

    fn obs(task_id: usize) -> Observation {
        Observation { features: vec![0.1, 0.2, 0.3, 0.4], proprio: vec![0.1, 0.2], task_id }
    }

    fn encode(store: &ParamStore, tasks: &TaskEmbedding, enc: &ObservationEncoder, o: Observation) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let v = enc.encode(&mut g, &p, tasks, &[o]).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn zero_input_with_zero_final_layer_gives_bias() {
        let (mut store, tasks, enc) = setup(1);
        let w = enc.final_layer().weight;
        store.get_mut(w).data_mut().fill(0.0);
        let bias = enc.final_layer().bias.unwrap();
        store.get_mut(bias).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let zero = Observation { features: vec![0.0; 4], proprio: vec![0.0; 2], task_id: 0 };
        let out = encode(&store, &tasks, &enc, zero);
        assert_eq!(out.data(), store.get(bias).data());
    }

    #[test]
    fn encoding_is_deterministic_and_task_sensitive() {
        let (store, tasks, enc) = setup(3);
        let a = encode(&store, &tasks, &enc, obs(1));
        assert_eq!(a, encode(&store, &tasks, &enc, obs(1)));
        assert_ne!(a, encode(&store, &tasks, &enc, obs(2)));
    }

    #[test]
    fn task_token_lookup_and_sparse_gradient() {
        let (store, tasks, _) = setup(3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let tok = tasks.lookup(&mut g, &p, &[1]).unwrap();
        assert_eq!(g.value(tok).data(), store.get(tasks.table).row(1));
        let sq = g.mul(tok, tok).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let gt = grads.get(p[tasks.table]).unwrap();
        assert!(gt[..8].iter().all(|&v| v == 0.0));
        assert!(gt[8..16].iter().any(|&v| v != 0.0));
        assert!(gt[16..].iter().all(|&v| v == 0.0));
        assert!(matches!(tasks.lookup(&mut g, &p, &[3]), Err(Error::Lookup(_))));
    }

    #[test]
    fn single_task_table_always_returns_its_row() {
        let (store, tasks, _) = setup(1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let tok = tasks.lookup(&mut g, &p, &[0]).unwrap();
        assert_eq!(g.value(tok).data(), store.get(tasks.table).data());
    }

    #[test]
    fn bad_width_is_rejected() {
        let (store, tasks, enc) = setup(1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let bad = Observation { features: vec![0.0; 3], proprio: vec![0.0; 2], task_id: 0 };
        assert!(enc.encode(&mut g, &p, &tasks, &[bad]).is_err());
    }
}
