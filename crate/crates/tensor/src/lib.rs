//! Reverse-mode automatic differentiation over NCHW `f32` tensors, with the
//! handful of operators a convolutional encoder–decoder needs.

pub mod error;
pub mod gemm;
pub mod graph;
pub mod kernels;
pub mod par;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Mode, NormUpdate, Var};
pub use kernels::ConvGeometry;
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
