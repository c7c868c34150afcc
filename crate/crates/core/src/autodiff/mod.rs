//! Reverse-mode differentiation over dense matrices, plus Adam.

mod adam;
mod check;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::gradient_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor2D;
