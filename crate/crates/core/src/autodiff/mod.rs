//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use scalar::Scalar;
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
