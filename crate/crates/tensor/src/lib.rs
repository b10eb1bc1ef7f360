//! Dense n-dimensional tensors with a tape-based reverse-mode autodiff engine.
//!
//! Values live in plain [`Tensor`]s, which are `Send` and can move between
//! threads. Differentiable computation is recorded on a [`Graph`], which is
//! confined to the thread that builds it and is discarded once gradients have
//! been read back.

mod error;
mod graph;
mod kernels;
mod ops;
mod real;
mod tensor;

pub mod gradcheck;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use kernels::{gemm, Transpose};
pub use ops::attention::{attention_probs, AttentionSegments};
pub use ops::conv::Conv2dGeometry;
pub use real::{DType, Real};
pub use tensor::Tensor;
