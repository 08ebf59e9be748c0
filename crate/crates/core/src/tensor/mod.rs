//! Dense tensors with reverse-mode automatic differentiation.

mod array;
mod graph;
pub(crate) mod kernels;

pub use array::Array;
pub use graph::{BnRunning, Graph, Mode, Tensor};


