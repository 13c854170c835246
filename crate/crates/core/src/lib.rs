//! Coarse-to-fine autoregressive action generation with scale-wise flow
//! matching over raw continuous actions.

pub mod actionflow;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod model;
pub mod multiscale;
pub mod nn;
pub mod numerics;
pub mod sampler;
pub mod scalear;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
