//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Forward operations optionally record themselves on a [`Graph`] (the
//! tape). [`backward`] replays the tape once in reverse and returns the
//! gradient of a scalar loss with respect to every tracked leaf.

mod graph;
mod ops;
mod tensor;

pub use graph::{backward, Gradients, Graph, NodeId};
pub use tensor::Tensor;
