//! End-to-end optimization of the whole policy in a single stage.

pub mod checkpoint;
pub mod loss;
pub mod normalizer;
pub mod optim;
pub mod trainer;

pub use checkpoint::{Checkpoint, RunSettings};
pub use loss::{check_loss_gradients, flow_loss, scale_weights, Example, FlowDraw, LossOutput};
pub use normalizer::Normalizer;
pub use optim::{AdamState, AdamW, CosineSchedule, Ema};
pub use trainer::{MetricRecord, StepOutcome, Trainer};
