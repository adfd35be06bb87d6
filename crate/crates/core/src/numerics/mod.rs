//! Dense tensors, forward kernels, reverse-mode autodiff and the
//! finite-difference oracle used to check it.

mod gradcheck;
pub mod ops;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_extended, GradCheck, Objective, REFINE_ABOVE, REL_ERR_FLOOR};
pub use real::{sum, F64x2, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
