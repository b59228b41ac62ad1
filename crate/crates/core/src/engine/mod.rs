//! Dense tensors, reverse-mode differentiation, optimizers and gradient
//! verification.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_floor, GRAD_CHECK_FLOOR};
pub use optim::{OptimizerConfig, OptimizerState};
pub use tape::{Tape, Var, LOG_CLAMP, NORM_EPS};
pub use tensor::{LabelMap, Tensor};
