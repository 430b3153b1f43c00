//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod check;
mod tape;
mod tensor;

pub use check::finite_diff_grad;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
