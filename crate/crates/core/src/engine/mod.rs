//! Dense tensors with reverse-mode automatic differentiation.

pub mod alloc;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
