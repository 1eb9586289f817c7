//! Dense-array math with reverse-mode gradients.
//!
//! [`Tensor`] holds values, [`Tape`] records operations for differentiation,
//! [`grad_check`] compares tape gradients with central differences.

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use kernels::{scaled_dot_attention, softmax};
pub use optim::Adam;
pub use tape::{Grads, Tape, Var, LOG_FLOOR};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

pub(crate) use tape::norm;
