//! Point agent in the unit square.

use serde::{Deserialize, Serialize};

use crate::conditioning::Observation;
use crate::error::{Error, Result};

pub const ARENA: f64 = 1.0;
pub const OBSTACLE_CENTER: [f64; 2] = [0.5, 0.5];
pub const OBSTACLE_RADIUS: f64 = 0.2;
/// Per-step displacement limit on each axis.
pub const MAX_STEP: f64 = 0.2;
pub const SUCCESS_TOLERANCE: f64 = 0.05;
pub const CHUNK_BUDGET: usize = 16;
/// A position further than this from the arena is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 10.0 * ARENA;

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Shortest distance from `c` to the segment `a → b`.
pub fn segment_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 { (((c[0] - a[0]) * d[0] + (c[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    distance([a[0] + t * d[0], a[1] + t * d[1]], c)
}

/// True when the segment passes through the obstacle disk.
pub fn crosses_obstacle(a: [f64; 2], b: [f64; 2]) -> bool {
    segment_distance(a, b, OBSTACLE_CENTER) < OBSTACLE_RADIUS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub task_id: usize,
    pub obstacle: bool,
    /// Side taken by the expert, when the task has one.
    pub mode: Option<i32>,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Moved,
    Collided,
}

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

impl EnvState {
    /// Agent and goal positions, then the agent position again as
    /// proprioception; values are rounded to 32-bit floats as stored.
    pub fn observe(&self) -> Observation {
        let a = [snap(self.agent[0]), snap(self.agent[1])];
        Observation {
            features: vec![a[0], a[1], snap(self.goal[0]), snap(self.goal[1])],
            proprio: a.to_vec(),
            task_id: self.task_id,
        }
    }

    pub fn reached(&self) -> bool {
        distance(self.agent, self.goal) <= SUCCESS_TOLERANCE
    }

    /// Executes one action: clipped to the step limit, checked against the
    /// obstacle, and clamped to the arena.
    pub fn apply(&mut self, action: &[f64]) -> Result<StepEvent> {
        if action.len() != 2 {
            return Err(Error::Rollout(format!("action of width {} for a planar agent", action.len())));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::Rollout(format!("non-finite action at step {}", self.steps)));
        }
        let next = [
            self.agent[0] + action[0].clamp(-MAX_STEP, MAX_STEP),
            self.agent[1] + action[1].clamp(-MAX_STEP, MAX_STEP),
        ];
        if next.iter().any(|v| *v < -DIVERGENCE_LIMIT || *v > ARENA + DIVERGENCE_LIMIT) {
            return Err(Error::Rollout(format!("agent left the arena at step {}: {next:?}", self.steps)));
        }
        let hit = self.obstacle && crosses_obstacle(self.agent, next);
        self.agent = [next[0].clamp(0.0, ARENA), next[1].clamp(0.0, ARENA)];
        self.steps += 1;
        Ok(if hit { StepEvent::Collided } else { StepEvent::Moved })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> EnvState {
        EnvState { agent: [0.5, 0.1], goal: [0.5, 0.9], task_id: 0, obstacle: true, mode: None, steps: 0 }
    }

    #[test]
    fn clipping_and_clamping() {
        let mut e = env();
        assert_eq!(e.apply(&[0.0, -1.0]).unwrap(), StepEvent::Moved);
        assert_eq!(e.agent, [0.5, 0.0]);
        e.apply(&[1.0, 0.05]).unwrap();
        assert!((e.agent[0] - 0.7).abs() < 1e-12 && (e.agent[1] - 0.05).abs() < 1e-12);
        assert_eq!(e.steps, 2);
    }

    #[test]
    fn collision_detection() {
        let mut e = env();
        e.agent = [0.5, 0.25];
        assert_eq!(e.apply(&[0.0, 0.1]).unwrap(), StepEvent::Collided);
        assert!(crosses_obstacle([0.2, 0.5], [0.8, 0.5]));
        assert!(!crosses_obstacle([0.2, 0.1], [0.8, 0.1]));
        let mut free = EnvState { obstacle: false, ..env() };
        free.agent = [0.5, 0.25];
        assert_eq!(free.apply(&[0.0, 0.1]).unwrap(), StepEvent::Moved);
    }

    #[test]
    fn invalid_actions() {
        let mut e = env();
        assert!(matches!(e.apply(&[f64::NAN, 0.0]), Err(Error::Rollout(_))));
        e.agent = [1e9, 0.0];
        assert!(matches!(e.apply(&[0.0, 0.0]), Err(Error::Rollout(_))));
    }

    #[test]
    fn observation_layout() {
        let o = env().observe();
        assert_eq!(o.features, vec![0.5, 0.1f32 as f64, 0.5, 0.9f32 as f64]);
        assert_eq!(o.proprio, vec![0.5, 0.1f32 as f64]);
    }
}
