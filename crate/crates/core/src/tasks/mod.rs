//! Desk-scale planar tasks, scripted experts, dataset files and rollouts.

pub mod dataset;
pub mod env;
pub mod generate;
pub mod rollout;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetHeader};
pub use env::EnvState;
pub use generate::{generate, gen_multimodal_reach, gen_multitask_waypoints, initial_states, Episode, EpisodeMeta, TaskKind};
pub use rollout::{rollout, rollout_parallel, summarize, ChunkPolicy, ModelPolicy, Outcome, RandomPolicy, ReplayPolicy, Summary};
