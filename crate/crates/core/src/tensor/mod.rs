//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod gradcheck;
pub mod kernels;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{check_inputs, finite_diff_check, GradReport};
pub use tape::{Binary, CustomBackward, Gradients, Reduce, Tape, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
