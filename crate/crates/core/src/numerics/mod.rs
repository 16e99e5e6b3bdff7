//! Dense `f64` tensors and a small reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;

pub(crate) use tensor::cross_entropy_row;
