//! Coarse-to-fine inference.
//!
//! For each scale in ascending order, one scale-wise transformer pass builds
//! the conditioning from the task token and the previously generated scales,
//! then Euler integration of the flow network carries Gaussian noise at
//! `τ = 1` to actions at `τ = 0`. Only the finest scale leaves normalized
//! space.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::Observation;
use crate::error::{Error, Result};
use crate::model::HiFlow;
use crate::nn::ParamStore;
use crate::numerics::{Graph, Tensor};
use crate::training::Normalizer;

/// A velocity field `v(x, τ)`.
pub trait VelocityField {
    fn velocity(&mut self, x: &Tensor, tau: f64) -> Result<Tensor>;
}

impl<F: FnMut(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&mut self, x: &Tensor, tau: f64) -> Result<Tensor> {
        self(x, tau)
    }
}

/// Integrates from `τ = 1` to `τ = 0` in `n_steps` explicit Euler steps of
/// size `1 / n_steps`, evaluating the field at the larger-`τ` end of each.
pub fn euler_integrate<F: VelocityField + ?Sized>(field: &mut F, x1: Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Config("at least one Euler step is required".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x1;
    for s in 0..n_steps {
        let tau = (n_steps - s) as f64 / n_steps as f64;
        let v = field.velocity(&x, tau)?;
        if v.shape() != x.shape() {
            return Err(Error::Dimension(format!("velocity {:?} for state {:?}", v.shape(), x.shape())));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi -= dt * vi;
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!("non-finite state after Euler step {}", s + 1)));
        }
    }
    Ok(x)
}

/// Everything produced while sampling one chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub chunk_len: usize,
    pub scales: Vec<usize>,
    /// Normalized actions of each scale, rows of width `A`.
    pub per_scale: Vec<Vec<Vec<f64>>>,
    /// The finest scale in action units.
    pub chunk: Vec<Vec<f64>>,
    pub normalizer: Normalizer,
    pub ar_passes: usize,
    pub flow_passes: usize,
    pub scale_ms: Vec<f64>,
}

impl SampleTrace {
    pub fn forward_passes(&self) -> usize {
        self.ar_passes + self.flow_passes
    }

    pub fn scale_tensor(&self, k: usize) -> Result<Tensor> {
        let rows = self.per_scale.get(k).ok_or_else(|| Error::Trace(format!("trace has no scale index {k}")))?;
        Tensor::from_rows(rows)
    }

    pub fn chunk_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.chunk)
    }

    pub fn is_complete(&self) -> bool {
        self.per_scale.len() == self.scales.len()
            && self.per_scale.iter().zip(&self.scales).all(|(rows, &i)| rows.len() == i)
            && self.chunk.len() == self.chunk_len
    }

    /// Structured record with per-scale arrays, counters and timings.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// A trained policy ready for sampling.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub model: &'a HiFlow,
    pub params: &'a ParamStore,
    pub normalizer: &'a Normalizer,
    pub n_steps: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a HiFlow, params: &'a ParamStore, normalizer: &'a Normalizer, n_steps: usize) -> Self {
        Self { model, params, normalizer, n_steps }
    }

    pub fn sample_chunk(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<SampleTrace> {
        Ok(self.sample_batch(std::slice::from_ref(obs), std::slice::from_mut(rng))?.remove(0))
    }

    /// Samples one chunk per observation; sample `b` draws all of its noise
    /// from `rngs[b]` in scale order.
    pub fn sample_batch(&self, obs: &[Observation], rngs: &mut [ChaCha8Rng]) -> Result<Vec<SampleTrace>> {
        if obs.len() != rngs.len() || obs.is_empty() {
            return Err(Error::Config(format!("{} observations with {} random streams", obs.len(), rngs.len())));
        }
        let batch = obs.len();
        let schedule = self.model.schedule();
        let a = self.model.config().action_dim;
        let mut generated: Vec<Vec<Tensor>> = vec![Vec::with_capacity(schedule.len()); batch];
        let mut scale_ms = Vec::with_capacity(schedule.len());
        let mut ar_passes = 0;
        let mut flow_passes = 0;

        for (k, &i) in schedule.scales().iter().enumerate() {
            let started = Instant::now();
            let cond = {
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let coarse = self.model.stack_upsampled(generated.iter().map(|e| e.iter().collect()).collect(), k)?;
                let out = self.model.conditioning(&mut g, &p, obs, &coarse)?;
                let span = self.model.scalear().select_span(&mut g, out, batch, k + 1, k)?;
                ar_passes += 1;
                g.value(span).clone()
            };
            let noise: Vec<f64> =
                rngs.iter_mut().flat_map(|rng| (0..i * a).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()).collect();
            let x1 = Tensor::matrix(batch * i, a, noise)?;
            let mut field = |x: &Tensor, tau: f64| -> Result<Tensor> {
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let xv = g.constant(x.clone());
                let cv = g.constant(cond.clone());
                let v = self.model.scale_velocity(&mut g, &p, xv, tau, cv, k)?;
                flow_passes += 1;
                Ok(g.value(v).clone())
            };
            let x0 = euler_integrate(&mut field, x1, self.n_steps)?;
            for (b, ex) in generated.iter_mut().enumerate() {
                ex.push(x0.slice_rows(b * i, (b + 1) * i));
            }
            scale_ms.push(started.elapsed().as_secs_f64() * 1e3);
        }

        generated
            .into_iter()
            .map(|scales| {
                let finest = scales.last().expect("schedule is non-empty");
                let chunk = self.normalizer.denormalize(finest)?;
                Ok(SampleTrace {
                    chunk_len: schedule.chunk_len(),
                    scales: schedule.scales().to_vec(),
                    per_scale: scales.iter().map(rows_of).collect(),
                    chunk: rows_of(&chunk),
                    normalizer: self.normalizer.clone(),
                    ar_passes,
                    flow_passes,
                    scale_ms: scale_ms.clone(),
                })
            })
            .collect()
    }
}

/// Cumulative displacement path of one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub scale: usize,
    /// Starts at the origin; one point per token boundary.
    pub points: Vec<[f64; 2]>,
}

/// Treats actions as per-step displacements. A token of scale `i` stands
/// for `T / i` steps of its mean action, so each scale's path spans the
/// whole chunk. Actions wider than two plot their first two components;
/// one-dimensional actions plot against time.
pub fn trace_panels(trace: &SampleTrace) -> Result<Vec<Panel>> {
    if !trace.is_complete() {
        return Err(Error::Trace(format!(
            "incomplete trace: {} of {} scales",
            trace.per_scale.len(),
            trace.scales.len()
        )));
    }
    trace
        .scales
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let steps = (trace.chunk_len / i) as f64;
            let actions = trace.normalizer.denormalize(&trace.scale_tensor(k)?)?;
            let mut at = [0.0, 0.0];
            let mut points = vec![at];
            for r in 0..i {
                let row = actions.row(r);
                if row.len() >= 2 {
                    at[0] += steps * row[0];
                    at[1] += steps * row[1];
                } else {
                    at[0] += steps;
                    at[1] += steps * row[0];
                }
                points.push(at);
            }
            Ok(Panel { scale: i, points })
        })
        .collect()
}

/// Renders the per-scale panels as a standalone SVG document.
pub fn render_svg(panels: &[Panel]) -> String {
    const W: f64 = 220.0;
    const PAD: f64 = 20.0;
    let all = panels.iter().flat_map(|p| p.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for p in all {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let inner = W - 2.0 * PAD;
    let map = |p: &[f64; 2], k: usize| {
        let x = k as f64 * W + PAD + (p[0] - x0) / span * inner;
        let y = W - PAD - (p[1] - y0) / span * inner;
        (x, y)
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"monospace\" font-size=\"11\">\n",
        W * panels.len() as f64,
        W + 10.0
    );
    for (k, panel) in panels.iter().enumerate() {
        svg.push_str(&format!(
            "<g class=\"panel\" data-scale=\"{}\">\n<rect x=\"{:.1}\" y=\"0\" width=\"{W}\" height=\"{W}\" fill=\"none\" stroke=\"#ccc\"/>\n<text x=\"{:.1}\" y=\"14\">scale {}</text>\n",
            panel.scale,
            k as f64 * W,
            k as f64 * W + 6.0,
            panel.scale
        ));
        let path: Vec<String> = panel
            .points
            .iter()
            .map(|p| {
                let (x, y) = map(p, k);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!("<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n", path.join(" ")));
        for (j, p) in panel.points.iter().enumerate() {
            let (x, y) = map(p, k);
            let last = j + 1 == panel.points.len();
            if j == 0 {
                svg.push_str(&format!("<circle class=\"start\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#2ca02c\"/>\n"));
            } else if last {
                svg.push_str(&format!(
                    "<rect class=\"end\" x=\"{:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"#d62728\"/>\n",
                    x - 4.0,
                    y - 4.0
                ));
            } else {
                svg.push_str(&format!("<circle class=\"boundary\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2\" fill=\"#555\"/>\n"));
            }
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the per-scale trajectory figure for `trace` to `path`.
pub fn trace_to_plot(trace: &SampleTrace, path: &Path) -> Result<Vec<Panel>> {
    let panels = trace_panels(trace)?;
    std::fs::write(path, render_svg(&panels)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(panels)
}
