//! Differentiable-computation substrate: dense tensors, a reverse-mode op
//! tape, Adam, gradient clipping, and the finite-difference gradient contract.

pub mod adam;
pub mod fd;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use fd::{finite_diff_check, LossFn};
pub use param::{GradMap, Param, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
