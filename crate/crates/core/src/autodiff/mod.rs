//! Reverse-mode differentiation, losses, the optimizer, the multi-format
//! training step and finite-difference gradient checks.

mod gradcheck;
mod loss;
mod multitask;
mod optim;
mod tape;

pub use gradcheck::{grad_check, grad_check_fn, grad_check_target, model_grad_check, relative_error, GradCheckReport};
pub use loss::{batch_mse, mse_loss, multitask_loss};
pub use multitask::{model_gradients, multitask_step, FormatBatch, StepLosses};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, OptimizerState};
pub use tape::{ConstId, Gradients, NodeId, Tape};
