//! Channels-last tensors, convolution and pooling kernels, and a tape-based
//! reverse-mode autodiff graph.

pub mod conv;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod pool;
mod tensor;

pub use conv::{ConvConfig, Padding};
pub use error::{Result, TensorError};
pub use graph::{Activation, Gradients, Graph, NodeId};
pub use params::{ParamEntry, ParamId, ParamRole, ParamStore};
pub use pool::PoolKind;
pub use tensor::{Tensor, MAX_RANK};
