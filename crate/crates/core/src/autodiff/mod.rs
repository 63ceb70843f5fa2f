//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_floor, grad_check_many, GradCheckReport};
pub use tape::{Gradients, Index, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{atanh_ratio, tanh_ratio};

#[cfg(test)]
mod tests;
