//! Minimal reverse-mode automatic differentiation over dense tensors, with
//! the optimizer and learning-rate schedule used for training.

mod graph;
mod kernels;
mod optim;
mod tensor;

pub mod gradcheck;

pub use gradcheck::{grad_check, grad_check_at, op_suite, CheckResult, DEFAULT_STEP, DENOM_FLOOR};
pub use graph::{BackwardReport, BnMode, Graph, OpKind, Var};
pub use optim::{cosine_lr, Sgd};
pub use tensor::{Real, Tensor};
