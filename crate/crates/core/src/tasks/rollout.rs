//! Closed-loop evaluation with open-loop chunk execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::Observation;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sampler::Sampler;
use crate::tasks::env::{distance, EnvState, StepEvent, MAX_STEP};
use crate::tasks::generate::Episode;

/// Produces one chunk in action units per observation. `envs[k]` is the
/// global index of the environment that produced `obs[k]`.
pub trait ChunkPolicy {
    fn act(&mut self, envs: &[usize], obs: &[Observation]) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub env: usize,
    pub success: bool,
    pub chunks: usize,
    pub collided: bool,
    pub error: Option<String>,
    pub final_distance: f64,
    pub trajectory: Vec<[f64; 2]>,
}

/// Runs every environment in lockstep until it succeeds, fails, or spends
/// `max_chunks` chunks. `first_env` is the global index of `envs[0]`.
pub fn rollout<P: ChunkPolicy + ?Sized>(
    policy: &mut P,
    envs: Vec<EnvState>,
    first_env: usize,
    max_chunks: usize,
) -> Result<Vec<Outcome>> {
    let mut states = envs;
    let mut outcomes: Vec<Outcome> = states
        .iter()
        .enumerate()
        .map(|(k, s)| Outcome {
            env: first_env + k,
            success: s.reached(),
            chunks: 0,
            collided: false,
            error: None,
            final_distance: distance(s.agent, s.goal),
            trajectory: vec![s.agent],
        })
        .collect();
    let mut active: Vec<usize> = (0..states.len()).filter(|&k| !outcomes[k].success).collect();
    for _ in 0..max_chunks {
        if active.is_empty() {
            break;
        }
        let ids: Vec<usize> = active.iter().map(|&k| first_env + k).collect();
        let obs: Vec<Observation> = active.iter().map(|&k| states[k].observe()).collect();
        let chunks = policy.act(&ids, &obs)?;
        if chunks.len() != active.len() {
            return Err(Error::Rollout(format!("policy returned {} chunks for {} environments", chunks.len(), active.len())));
        }
        let mut still = Vec::with_capacity(active.len());
        for (&k, chunk) in active.iter().zip(&chunks) {
            let (state, out) = (&mut states[k], &mut outcomes[k]);
            out.chunks += 1;
            let mut done = false;
            for r in 0..chunk.rows() {
                match state.apply(chunk.row(r)) {
                    Ok(StepEvent::Moved) => {}
                    Ok(StepEvent::Collided) => {
                        out.collided = true;
                        done = true;
                    }
                    Err(e) => {
                        out.error = Some(e.to_string());
                        done = true;
                    }
                }
                out.trajectory.push(state.agent);
                if done {
                    break;
                }
                if state.reached() {
                    out.success = true;
                    done = true;
                    break;
                }
            }
            out.final_distance = distance(state.agent, state.goal);
            if !done {
                still.push(k);
            }
        }
        active = still;
    }
    Ok(outcomes)
}

/// Splits the environments over up to `threads` workers, each with its
/// own policy from `make(first_env, count)`. Results are in environment
/// order.
pub fn rollout_parallel<P, F>(envs: Vec<EnvState>, max_chunks: usize, threads: usize, make: F) -> Result<Vec<Outcome>>
where
    P: ChunkPolicy,
    F: Fn(usize, usize) -> P + Sync,
{
    let threads = threads.clamp(1, envs.len().max(1));
    if threads == 1 {
        let n = envs.len();
        return rollout(&mut make(0, n), envs, 0, max_chunks);
    }
    let per = envs.len().div_ceil(threads);
    let groups: Vec<(usize, Vec<EnvState>)> =
        envs.chunks(per).enumerate().map(|(g, c)| (g * per, c.to_vec())).collect();
    let make = &make;
    let results: Vec<Result<Vec<Outcome>>> = std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .into_iter()
            .map(|(first, group)| s.spawn(move || rollout(&mut make(first, group.len()), group, first, max_chunks)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rollouts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_chunks: f64,
    pub collisions: usize,
}

pub fn summarize(outcomes: &[Outcome]) -> Summary {
    let n = outcomes.len();
    let successes = outcomes.iter().filter(|o| o.success).count();
    Summary {
        rollouts: n,
        successes,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        mean_chunks: if n == 0 { 0.0 } else { outcomes.iter().map(|o| o.chunks as f64).sum::<f64>() / n as f64 },
        collisions: outcomes.iter().filter(|o| o.collided).count(),
    }
}

/// Replays recorded demonstrations: environment `k` receives episode `k`'s
/// chunks in order, then zeros.
pub struct ReplayPolicy {
    episodes: Vec<Episode>,
    cursor: Vec<usize>,
}

impl ReplayPolicy {
    pub fn new(episodes: Vec<Episode>) -> Self {
        let n = episodes.len();
        Self { episodes, cursor: vec![0; n] }
    }
}

impl ChunkPolicy for ReplayPolicy {
    fn act(&mut self, envs: &[usize], _obs: &[Observation]) -> Result<Vec<Tensor>> {
        envs.iter()
            .map(|&k| {
                let ep = self.episodes.get(k).ok_or_else(|| Error::Rollout(format!("no demonstration for environment {k}")))?;
                let c = self.cursor[k];
                self.cursor[k] += 1;
                Ok(ep.chunks.get(c).cloned().unwrap_or_else(|| Tensor::zeros(ep.chunks[0].shape().to_vec())))
            })
            .collect()
    }
}

/// Uniform actions within the step limit, one stream per environment.
pub struct RandomPolicy {
    seed: u64,
    chunk_len: usize,
    rngs: std::collections::BTreeMap<usize, ChaCha8Rng>,
}

impl RandomPolicy {
    pub fn new(seed: u64, chunk_len: usize) -> Self {
        Self { seed, chunk_len, rngs: Default::default() }
    }
}

impl ChunkPolicy for RandomPolicy {
    fn act(&mut self, envs: &[usize], _obs: &[Observation]) -> Result<Vec<Tensor>> {
        envs.iter()
            .map(|&k| {
                let seed = self.seed;
                let rng = self.rngs.entry(k).or_insert_with(|| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    r.set_stream(k as u64);
                    r
                });
                let data = (0..self.chunk_len * 2).map(|_| rng.gen_range(-MAX_STEP..=MAX_STEP)).collect();
                Tensor::matrix(self.chunk_len, 2, data)
            })
            .collect()
    }
}

/// A trained model; environment `k` samples from the seed's stream `k`.
pub struct ModelPolicy<'a> {
    sampler: Sampler<'a>,
    seed: u64,
    rngs: std::collections::BTreeMap<usize, ChaCha8Rng>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(sampler: Sampler<'a>, seed: u64) -> Self {
        Self { sampler, seed, rngs: Default::default() }
    }
}

impl ChunkPolicy for ModelPolicy<'_> {
    fn act(&mut self, envs: &[usize], obs: &[Observation]) -> Result<Vec<Tensor>> {
        let seed = self.seed;
        let mut rngs: Vec<ChaCha8Rng> = envs
            .iter()
            .map(|&k| {
                self.rngs
                    .remove(&k)
                    .unwrap_or_else(|| {
                        let mut r = ChaCha8Rng::seed_from_u64(seed);
                        r.set_stream(k as u64);
                        r
                    })
            })
            .collect();
        let traces = self.sampler.sample_batch(obs, &mut rngs)?;
        for (&k, r) in envs.iter().zip(rngs) {
            self.rngs.insert(k, r);
        }
        traces.iter().map(|t| t.chunk_tensor()).collect()
    }
}
