//! Minimal tape-based reverse-mode differentiation over dense `f64` arrays.

mod broadcast;
mod tape;
mod tensor;

pub use tape::{argmax, rotation_zyx, sigmoid, softplus, Gradients, Tape, Var, NORMALIZE_EPS};
pub use tensor::Tensor;
