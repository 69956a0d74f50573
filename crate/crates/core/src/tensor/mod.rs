//! Dense tensors, the reverse-mode tape, Adam, and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod finite_diff;
pub mod kernels;
pub mod param;
pub mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::AttnMask;
pub use param::{ParamGrads, ParamId, ParamStore};
pub use tape::{AttentionProbs, AttnKind, AttnTag, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod op_tests;
