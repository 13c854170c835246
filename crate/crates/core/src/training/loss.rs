//! Scale-weighted flow-matching loss under teacher forcing.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::actionflow::{interpolate, velocity_target};
use crate::conditioning::Observation;
use crate::error::{Error, Result};
use crate::model::HiFlow;
use crate::multiscale::{build_targets, MultiScaleTargets, ScaleSchedule};
use crate::nn::{Bound, ParamStore};
use crate::numerics::{grad_check, GradCheck, GradCheckReport, Graph, Tensor, Var};

/// One observation with its normalized `T × A` action chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub obs: Observation,
    pub chunk: Tensor,
}

/// Noise and flow time for every scale of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw {
    pub noise: Vec<Tensor>,
    pub taus: Vec<f64>,
}

impl FlowDraw {
    /// Per scale in order: `τ ~ U[0, 1)` then `i × A` standard normals.
    pub fn sample<R: Rng>(schedule: &ScaleSchedule, action_dim: usize, rng: &mut R) -> Self {
        let mut noise = Vec::with_capacity(schedule.len());
        let mut taus = Vec::with_capacity(schedule.len());
        for &i in schedule.scales() {
            taus.push(rng.gen::<f64>());
            let data = (0..i * action_dim).map(|_| rng.sample(StandardNormal)).collect();
            noise.push(Tensor::matrix(i, action_dim, data).expect("consistent shape"));
        }
        Self { noise, taus }
    }
}

/// `(i / T) / |S|` for each scale.
pub fn scale_weights(schedule: &ScaleSchedule) -> Vec<f64> {
    let n = schedule.len() as f64;
    schedule.scales().iter().map(|&i| schedule.weight(i) / n).collect()
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub value: f64,
    /// Unweighted mean squared error of each scale.
    pub per_scale: Vec<f64>,
}

pub fn flow_loss(model: &HiFlow, g: &mut Graph, p: &Bound, batch: &[Example], draws: &[FlowDraw]) -> Result<LossOutput> {
    let schedule = model.schedule();
    let a = model.config().action_dim;
    if batch.is_empty() || draws.len() != batch.len() {
        return Err(Error::Schema(format!("{} examples with {} flow draws", batch.len(), draws.len())));
    }
    let targets: Vec<MultiScaleTargets> = batch
        .iter()
        .map(|ex| {
            if ex.chunk.cols() != a || ex.chunk.rows() != schedule.chunk_len() {
                return Err(Error::Schema(format!(
                    "chunk {:?} does not match [{}, {a}]",
                    ex.chunk.shape(),
                    schedule.chunk_len()
                )));
            }
            build_targets(&ex.chunk, schedule)
        })
        .collect::<Result<_>>()?;

    let packed = model.packed_len();
    let rows = batch.len() * packed;
    let mut x = Vec::with_capacity(rows * a);
    let mut v = Vec::with_capacity(rows * a);
    let mut taus = Vec::with_capacity(rows);
    let mut row_scale = Vec::with_capacity(rows);
    for (t, d) in targets.iter().zip(draws) {
        for (k, (i, target)) in t.iter().enumerate() {
            let state = interpolate(target, &d.noise[k], d.taus[k])?;
            x.extend_from_slice(state.x_tau.data());
            v.extend_from_slice(velocity_target(target, &d.noise[k])?.data());
            taus.extend(std::iter::repeat(d.taus[k]).take(i));
            row_scale.extend(std::iter::repeat(k).take(i));
        }
    }

    let obs: Vec<Observation> = batch.iter().map(|ex| ex.obs.clone()).collect();
    let cond = model.teacher_forced(g, p, &obs, &targets)?;
    let x = g.constant(Tensor::matrix(rows, a, x)?);
    let v = g.constant(Tensor::matrix(rows, a, v)?);
    let v_hat = model.packed_velocity(g, p, x, &taus, cond)?;
    let diff = g.sub(v_hat, v)?;
    let sq = g.mul(diff, diff)?;

    let weights = scale_weights(schedule);
    let counts: Vec<f64> = schedule.scales().iter().map(|&i| (batch.len() * i * a) as f64).collect();
    let mut per_scale = vec![0.0; schedule.len()];
    for (r, row) in g.value(sq).data().chunks(a).enumerate() {
        per_scale[row_scale[r]] += row.iter().sum::<f64>();
    }
    for (k, m) in per_scale.iter_mut().enumerate() {
        *m /= counts[k];
        if !m.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at scale {}", schedule.scales()[k])));
        }
    }
    let row_weights = row_scale.iter().map(|&k| weights[k] / counts[k]).collect();
    let loss = g.row_weighted_sum(sq, row_weights)?;
    Ok(LossOutput { loss, value: g.value(loss).data()[0], per_scale })
}

/// Finite-difference check of the full loss with respect to every
/// parameter, holding the batch and flow draws fixed.
pub fn check_loss_gradients(
    model: &HiFlow,
    params: &ParamStore,
    batch: &[Example],
    draws: &[FlowDraw],
    opts: GradCheck,
) -> Result<GradCheckReport> {
    grad_check(
        params.tensors(),
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(flow_loss(model, g, &p, batch, draws)?.loss)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_for_dyadic_schedule() {
        let w = scale_weights(&ScaleSchedule::dyadic(8).unwrap());
        assert_eq!(w, vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0]);
        assert_eq!(scale_weights(&ScaleSchedule::new(vec![8], 8).unwrap()), vec![1.0]);
    }
}
