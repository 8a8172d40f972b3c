//! Dense numeric core: tensors, reverse-mode differentiation and Adam.

mod adam;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper};
pub use kernels::{count_macs, gemm, Layout};
pub use param::{AdamState, Parameter};
pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;
