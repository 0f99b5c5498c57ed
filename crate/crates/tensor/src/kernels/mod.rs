//! Raw slice kernels behind the graph ops. Exposed for benchmarking.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads, ConvShape};
