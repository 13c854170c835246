//! Scripted experts and demonstration generation.
//!
//! Each episode draws from its own random stream (the seed with stream
//! index equal to the episode index), so episodes can be produced in any
//! order or in parallel with identical results.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::Observation;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tasks::env::{EnvState, StepEvent};

/// Expert speed on the reach task, arena units per step.
pub const REACH_SPEED: f64 = 0.05;
pub const WAYPOINT_RADIUS: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reach,
    Waypoints,
}

impl TaskKind {
    pub const NAMES: [&'static str; 2] = ["reach", "waypoints"];
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Reach => "reach",
            TaskKind::Waypoints => "waypoints",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(TaskKind::Reach),
            "waypoints" => Ok(TaskKind::Waypoints),
            other => Err(Error::Config(format!(
                "unknown task '{other}', valid tasks: {}",
                TaskKind::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Side of the obstacle taken by the expert (±1), or 0.
    pub mode: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task_id: usize,
    pub observations: Vec<Observation>,
    pub chunks: Vec<Tensor>,
    pub meta: EpisodeMeta,
}

impl Episode {
    /// Initial environment state the episode was recorded from.
    pub fn initial_state(&self, kind: TaskKind) -> EnvState {
        EnvState {
            agent: self.meta.start,
            goal: self.meta.goal,
            task_id: self.task_id,
            obstacle: kind == TaskKind::Reach,
            mode: (self.meta.mode != 0).then_some(self.meta.mode),
            steps: 0,
        }
    }
}

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Per-step displacements moving at `speed` along the polyline through
/// `waypoints`; the last step lands exactly on the final waypoint.
pub fn follow_polyline(start: [f64; 2], waypoints: &[[f64; 2]], speed: f64) -> Vec<[f64; 2]> {
    let mut at = start;
    let mut next = 0;
    let mut actions = Vec::new();
    while next < waypoints.len() {
        let from = at;
        let mut budget = speed;
        while next < waypoints.len() && budget > 0.0 {
            let w = waypoints[next];
            let d = [w[0] - at[0], w[1] - at[1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len <= budget {
                at = w;
                budget -= len;
                next += 1;
            } else {
                at = [at[0] + d[0] / len * budget, at[1] + d[1] / len * budget];
                budget = 0.0;
            }
        }
        actions.push([at[0] - from[0], at[1] - from[1]]);
    }
    actions
}

/// Minimum-jerk profile `10s³ − 15s⁴ + 6s⁵`.
fn min_jerk(s: f64) -> f64 {
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// `steps` displacements from `a` to `b` with a minimum-jerk speed profile.
pub fn min_jerk_segment(a: [f64; 2], b: [f64; 2], steps: usize) -> Vec<[f64; 2]> {
    let d = [b[0] - a[0], b[1] - a[1]];
    (0..steps)
        .map(|j| {
            let ds = min_jerk((j + 1) as f64 / steps as f64) - min_jerk(j as f64 / steps as f64);
            [d[0] * ds, d[1] * ds]
        })
        .collect()
}

/// Runs the actions from `env`, observing at every chunk boundary.
/// Actions are rounded to 32-bit floats first and the final chunk is
/// zero-padded to `chunk_len` rows.
fn record(mut env: EnvState, actions: &[[f64; 2]], chunk_len: usize, meta: EpisodeMeta) -> Result<Episode> {
    let task_id = env.task_id;
    let mut observations = Vec::new();
    let mut chunks = Vec::new();
    for block in actions.chunks(chunk_len) {
        observations.push(env.observe());
        let mut data = vec![0.0; chunk_len * 2];
        for (r, a) in block.iter().enumerate() {
            data[2 * r] = snap(a[0]);
            data[2 * r + 1] = snap(a[1]);
        }
        for row in data.chunks(2) {
            if env.apply(row)? == StepEvent::Collided {
                return Err(Error::Rollout(format!("expert collided in episode seeded {}", meta.seed)));
            }
        }
        chunks.push(Tensor::matrix(chunk_len, 2, data)?);
    }
    Ok(Episode { task_id, observations, chunks, meta })
}

/// Start, goal and side for reach episode `index`.
pub fn reach_initial(seed: u64, index: u64) -> EnvState {
    let mut rng = episode_rng(seed, index);
    let start = [snap(0.5 + rng.gen_range(-0.1..0.1)), snap(0.1 + rng.gen_range(-0.05..0.05))];
    let goal = [snap(0.5 + rng.gen_range(-0.1..0.1)), snap(0.9 + rng.gen_range(-0.05..0.05))];
    let side = if rng.gen_bool(0.5) { 1 } else { -1 };
    EnvState { agent: start, goal, task_id: 0, obstacle: true, mode: Some(side), steps: 0 }
}

/// The expert's route around the obstacle on side `side` (±1).
pub fn reach_waypoints(goal: [f64; 2], side: i32) -> Vec<[f64; 2]> {
    let x = 0.5 + 0.3 * side as f64;
    vec![[x, 0.35], [x, 0.65], goal]
}

/// Agent must reach a goal behind a central obstacle; the expert passes
/// it on either side with equal probability.
pub fn gen_multimodal_reach(n_episodes: usize, seed: u64, chunk_len: usize) -> Result<Vec<Episode>> {
    (0..n_episodes as u64)
        .map(|e| {
            let env = reach_initial(seed, e);
            let side = env.mode.expect("reach has a side");
            let actions = follow_polyline(env.agent, &reach_waypoints(env.goal, side), REACH_SPEED);
            let meta = EpisodeMeta { seed, start: env.agent, goal: env.goal, mode: side };
            record(env, &actions, chunk_len, meta)
        })
        .collect()
}

/// Corners of task `task`'s pattern: three points a quarter turn apart on
/// a circle around the arena center, starting at angle `2π·task/num_tasks`.
pub fn waypoint_pattern(task: usize, num_tasks: usize) -> [[f64; 2]; 3] {
    let theta = std::f64::consts::TAU * task as f64 / num_tasks as f64;
    let at = |k: f64| {
        let a = theta + k * std::f64::consts::FRAC_PI_2;
        [0.5 + WAYPOINT_RADIUS * a.cos(), 0.5 + WAYPOINT_RADIUS * a.sin()]
    };
    [at(0.0), at(1.0), at(2.0)]
}

pub fn waypoints_initial(seed: u64, index: u64, num_tasks: usize) -> EnvState {
    let mut rng = episode_rng(seed, index);
    let task = index as usize % num_tasks;
    let [w0, _, w2] = waypoint_pattern(task, num_tasks);
    let start = [snap(w0[0] + rng.gen_range(-0.02..0.02)), snap(w0[1] + rng.gen_range(-0.02..0.02))];
    EnvState { agent: start, goal: [snap(w2[0]), snap(w2[1])], task_id: task, obstacle: false, mode: None, steps: 0 }
}

/// Task `e mod num_tasks` for episode `e`: traverse the task's pattern one
/// chunk per segment with smooth speed profiles.
pub fn gen_multitask_waypoints(n_episodes: usize, num_tasks: usize, seed: u64, chunk_len: usize) -> Result<Vec<Episode>> {
    if num_tasks < 2 {
        return Err(Error::Config("the waypoint task needs at least 2 tasks".into()));
    }
    (0..n_episodes as u64)
        .map(|e| {
            let env = waypoints_initial(seed, e, num_tasks);
            let [_, w1, _] = waypoint_pattern(env.task_id, num_tasks);
            let mut actions = min_jerk_segment(env.agent, w1, chunk_len);
            actions.extend(min_jerk_segment(w1, env.goal, chunk_len));
            let meta = EpisodeMeta { seed, start: env.agent, goal: env.goal, mode: 0 };
            record(env, &actions, chunk_len, meta)
        })
        .collect()
}

/// Initial states for evaluation, drawn like the demonstrations.
pub fn initial_states(kind: TaskKind, n: usize, seed: u64, num_tasks: usize) -> Vec<EnvState> {
    (0..n as u64)
        .map(|e| match kind {
            TaskKind::Reach => reach_initial(seed, e),
            TaskKind::Waypoints => waypoints_initial(seed, e, num_tasks),
        })
        .collect()
}

pub fn generate(kind: TaskKind, n_episodes: usize, num_tasks: usize, seed: u64, chunk_len: usize) -> Result<Vec<Episode>> {
    match kind {
        TaskKind::Reach => gen_multimodal_reach(n_episodes, seed, chunk_len),
        TaskKind::Waypoints => gen_multitask_waypoints(n_episodes, num_tasks, seed, chunk_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::env::distance;

    #[test]
    fn polyline_lands_on_goal() {
        let acts = follow_polyline([0.0, 0.0], &[[0.12, 0.0], [0.12, 0.12]], 0.05);
        assert_eq!(acts.len(), 5);
        let end = acts.iter().fold([0.0, 0.0], |p, a| [p[0] + a[0], p[1] + a[1]]);
        assert!(distance(end, [0.12, 0.12]) < 1e-12);
        // the corner step splits its budget across both legs
        assert!((acts[2][0] - 0.02).abs() < 1e-12 && (acts[2][1] - 0.03).abs() < 1e-12);
        assert!((acts[4][1] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn min_jerk_segment_sums_to_displacement() {
        let acts = min_jerk_segment([0.0, 0.0], [0.3, -0.1], 8);
        let end = acts.iter().fold([0.0, 0.0], |p, a| [p[0] + a[0], p[1] + a[1]]);
        assert!(distance(end, [0.3, -0.1]) < 1e-12);
        // symmetric bell: slow at the ends, fastest in the middle
        assert!(acts[0][0] < acts[3][0] && (acts[3][0] - acts[4][0]).abs() < 1e-12);
    }

    #[test]
    fn task_names() {
        assert_eq!("reach".parse::<TaskKind>().unwrap(), TaskKind::Reach);
        let err = "pick".parse::<TaskKind>().unwrap_err().to_string();
        assert!(err.contains("reach") && err.contains("waypoints"));
    }
}
