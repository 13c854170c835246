//! Shared velocity network for flow matching at every scale.
//!
//! The straight-line interpolant runs from data at `τ = 0` to Gaussian noise
//! at `τ = 1`. Each token gets its own AdaLN modulation from the sum of a
//! flow-time embedding and its row of the scale-wise conditioning.

use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{heads_for, modulate, timestep_features, AdaLnBlock, Bound, Init, Linear, ParamBuilder, ParamId};
use crate::numerics::{AttentionMask, Graph, Tensor, Var};

/// Noisy actions at flow time `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x_tau: Tensor,
    pub tau: f64,
}

fn check_pair(target: &Tensor, noise: &Tensor) -> Result<()> {
    if target.shape() != noise.shape() {
        return Err(Error::Dimension(format!(
            "target {:?} and noise {:?} differ in shape",
            target.shape(),
            noise.shape()
        )));
    }
    Ok(())
}

/// `(1 − τ)·target + τ·noise`.
pub fn interpolate(target: &Tensor, noise: &Tensor, tau: f64) -> Result<FlowState> {
    check_pair(target, noise)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Range(format!("flow time {tau} outside [0, 1]")));
    }
    let data = target.data().iter().zip(noise.data()).map(|(a, e)| (1.0 - tau) * a + tau * e).collect();
    Ok(FlowState { x_tau: Tensor::new(target.shape().to_vec(), data)?, tau })
}

/// `noise − target`, the constant velocity of the straight path.
pub fn velocity_target(target: &Tensor, noise: &Tensor) -> Result<Tensor> {
    check_pair(target, noise)?;
    let data = target.data().iter().zip(noise.data()).map(|(a, e)| e - a).collect();
    Tensor::new(target.shape().to_vec(), data)
}

/// Index into the per-step position table for each token of scale `scale`:
/// the step at the center of the token's group.
pub fn token_positions(scale: usize, chunk_len: usize) -> Vec<usize> {
    (0..scale).map(|g| (2 * g + 1) * chunk_len / (2 * scale)).collect()
}

#[derive(Clone, Debug)]
pub struct FlowNet {
    x_in: Linear,
    pos_emb: Option<ParamId>,
    time_in: Linear,
    time_out: Linear,
    cond_in: Linear,
    blocks: Vec<AdaLnBlock>,
    final_mod: Linear,
    out: Linear,
    chunk_len: usize,
    time_dim: usize,
    hidden: usize,
    action_dim: usize,
}

impl FlowNet {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        b.scoped("flow", |b| Self {
            x_in: b.linear("x_in", cfg.action_dim, h, Init::XavierUniform),
            pos_emb: cfg
                .flow_positional
                .then(|| b.tensor("pos_emb", cfg.chunk_len, h, Init::Normal(0.02))),
            time_in: b.linear("time_in", cfg.time_embed_dim, h, Init::XavierUniform),
            time_out: b.linear("time_out", h, h, Init::XavierUniform),
            cond_in: b.linear("cond_in", h, h, Init::XavierUniform),
            blocks: (0..cfg.flow_depth)
                .map(|i| b.scoped(&format!("block{i}"), |b| AdaLnBlock::new(b, h, cfg.mlp_ratio, heads_for(h))))
                .collect(),
            final_mod: b.linear("final_mod", h, 2 * h, Init::Zeros),
            out: b.linear("out", h, cfg.action_dim, Init::Zeros),
            chunk_len: cfg.chunk_len,
            time_dim: cfg.time_embed_dim,
            hidden: h,
            action_dim: cfg.action_dim,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Velocity for a packed set of tokens.
    ///
    /// `x` is `[N, A]`, `cond` is `[N, H]`; `taus[r]` and `positions[r]`
    /// describe row `r`. The mask covers one sequence; `N` must be a
    /// multiple of its length.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        taus: &[f64],
        cond: Var,
        positions: &[usize],
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        if g.value(x).cols() != self.action_dim {
            return Err(Error::Dimension(format!(
                "actions have width {}, expected {}",
                g.value(x).cols(),
                self.action_dim
            )));
        }
        let cond_shape = g.value(cond).shape().to_vec();
        if g.value(cond).rows() != n || g.value(cond).cols() != self.hidden {
            return Err(Error::Conditioning(format!(
                "conditioning {cond_shape:?} for {n} tokens of width {}",
                self.hidden
            )));
        }
        if taus.len() != n || positions.len() != n {
            return Err(Error::Conditioning(format!(
                "{} flow times and {} positions for {n} tokens",
                taus.len(),
                positions.len()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&q| q >= self.chunk_len) {
            return Err(Error::Lookup(format!("position {bad} outside chunk of {}", self.chunk_len)));
        }

        let mut h = self.x_in.forward(g, p, x)?;
        if let Some(pe) = self.pos_emb {
            let pos = g.gather_rows(p[pe], positions.to_vec())?;
            h = g.add(h, pos)?;
        }

        let feats: Vec<f64> = taus.iter().flat_map(|&t| timestep_features(t, self.time_dim)).collect();
        let feats = g.constant(Tensor::matrix(n, self.time_dim, feats)?);
        let t = self.time_in.forward(g, p, feats)?;
        let t = g.silu(t);
        let t = self.time_out.forward(g, p, t)?;
        let c = self.cond_in.forward(g, p, cond)?;
        let c = g.add(c, t)?;
        let c = g.silu(c);

        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, p, h, c, None, mask)?;
            if !g.value(h).all_finite() {
                return Err(Error::Numeric(format!("non-finite activation after flow block {i}")));
            }
        }
        let m = self.final_mod.forward(g, p, c)?;
        let shift = g.slice_cols(m, 0, self.hidden)?;
        let scale = g.slice_cols(m, self.hidden, self.hidden)?;
        let h = g.layer_norm(h);
        let h = modulate(g, h, shift, scale)?;
        let v = self.out.forward(g, p, h)?;
        if !g.value(v).all_finite() {
            return Err(Error::Numeric("non-finite velocity".into()));
        }
        Ok(v)
    }

    /// Velocity for one scale's tokens of a single example.
    pub fn predict_velocity(&self, g: &mut Graph, p: &Bound, state: &FlowState, cond: &Tensor) -> Result<Var> {
        let i = state.x_tau.rows();
        if cond.rows() != i {
            return Err(Error::Conditioning(format!("{} conditioning rows for {i} tokens", cond.rows())));
        }
        if i == 0 || self.chunk_len % i != 0 {
            return Err(Error::Schedule(format!("{i} tokens is not a scale of chunk length {}", self.chunk_len)));
        }
        let x = g.constant(state.x_tau.clone());
        let c = g.constant(cond.clone());
        let mask = Arc::new(AttentionMask::full(i));
        self.forward(g, p, x, &vec![state.tau; i], c, &token_positions(i, self.chunk_len), &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolation_endpoints_and_values() {
        let a = Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap();
        let e = Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap();
        assert_eq!(interpolate(&a, &e, 0.0).unwrap().x_tau, a);
        assert_eq!(interpolate(&a, &e, 1.0).unwrap().x_tau, e);
        let two = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let zero = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(interpolate(&two, &zero, 0.25).unwrap().x_tau.data(), &[1.5]);
        assert!(matches!(interpolate(&a, &e, 1.5), Err(Error::Range(_))));
        assert!(matches!(interpolate(&a, &e, -0.1), Err(Error::Range(_))));
    }

    #[test]
    fn velocity_targets() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let e = Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap();
        assert_eq!(velocity_target(&a, &e).unwrap().data(), &[2.0, 1.0]);
        assert!(velocity_target(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(velocity_target(&z, &e).unwrap(), e);
    }

    #[test]
    fn velocity_is_constant_along_the_path() {
        let a = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let e = Tensor::matrix(1, 3, vec![-1.1, 0.4, 0.0]).unwrap();
        let v = velocity_target(&a, &e).unwrap();
        for (t0, t1) in [(0.2, 0.7), (0.0, 1.0)] {
            let x0 = interpolate(&a, &e, t0).unwrap().x_tau;
            let x1 = interpolate(&a, &e, t1).unwrap().x_tau;
            for k in 0..3 {
                let slope = (x1.data()[k] - x0.data()[k]) / (t1 - t0);
                assert!((slope - v.data()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positions_sit_at_group_centers() {
        assert_eq!(token_positions(1, 8), vec![4]);
        assert_eq!(token_positions(2, 8), vec![2, 6]);
        assert_eq!(token_positions(8, 8), (0..8).collect::<Vec<_>>());
    }

    fn net(positional: bool, depth: usize) -> (FlowNet, ParamStore) {
        let cfg = ModelConfig { hidden: 8, flow_depth: depth, flow_positional: positional, time_embed_dim: 8, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FlowNet::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        (f, store)
    }

    fn velocity(f: &FlowNet, store: &ParamStore, x: &Tensor, cond: &Tensor, mask: AttentionMask) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let n = x.rows();
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.clone());
        let v = f
            .forward(&mut g, &p, xv, &vec![0.4; n], cv, &token_positions(n, 8), &Arc::new(mask))
            .unwrap();
        g.value(v).clone()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let (f, store) = net(true, 1);
        for i in [1, 2, 4, 8] {
            let state = FlowState { x_tau: random(i, 2, 1), tau: 0.5 };
            let cond = random(i, 8, 2);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let v = f.predict_velocity(&mut g, &p, &state, &cond).unwrap();
            assert_eq!(g.value(v).shape(), &[i, 2]);
            let w = f.predict_velocity(&mut g, &p, &state, &cond).unwrap();
            assert_eq!(g.value(v), g.value(w));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let state = FlowState { x_tau: random(2, 2, 1), tau: 0.5 };
        let err = f.predict_velocity(&mut g, &p, &state, &random(3, 8, 2)).unwrap_err();
        assert!(matches!(err, Error::Conditioning(_)));
    }

    #[test]
    fn swapping_rows_without_positions_swaps_outputs() {
        let (f, store) = net(false, 2);
        let x = random(4, 2, 5);
        let cond = random(4, 8, 6);
        let base = velocity(&f, &store, &x, &cond, AttentionMask::full(4));
        let swap = |t: &Tensor| {
            let mut rows: Vec<Vec<f64>> = (0..4).map(|r| t.row(r).to_vec()).collect();
            rows.swap(1, 3);
            Tensor::from_rows(&rows).unwrap()
        };
        let out = velocity(&f, &store, &swap(&x), &swap(&cond), AttentionMask::full(4));
        assert!(out.max_abs_diff(&swap(&base)) < 1e-12);
    }

    #[test]
    fn each_position_has_its_own_modulation() {
        let (f, store) = net(true, 1);
        let x = random(4, 2, 7);
        let cond = random(4, 8, 8);
        let mut bumped = cond.clone();
        bumped.data_mut()[2 * 8 + 3] += 0.5;

        let base = velocity(&f, &store, &x, &cond, AttentionMask::identity(4));
        let out = velocity(&f, &store, &x, &bumped, AttentionMask::identity(4));
        for r in 0..4 {
            assert_eq!(base.row(r) == out.row(r), r != 2, "row {r}");
        }
        let base = velocity(&f, &store, &x, &cond, AttentionMask::full(4));
        let out = velocity(&f, &store, &x, &bumped, AttentionMask::full(4));
        assert_ne!(base.row(2), out.row(2));
    }
}
