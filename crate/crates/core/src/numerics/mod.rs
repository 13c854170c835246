//! Dense tensors, a reverse-mode tape, and a finite-difference gradient oracle.

mod attention;
mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use attention::AttentionMask;
pub use gradcheck::{grad_check, GradCheck, GradCheckReport, GradFailure};
pub use graph::{masked_attention, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
