//! Dense `f64` tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, InputError, ABS_FLOOR, DEFAULT_STEP};
pub use tape::{gelu, sigmoid, CustomOp, Pointwise, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::dot;
