//! Dense row-major tensors.
//!
//! A tensor is an immutable shape + flat buffer. When it was produced by
//! an operation recorded on a tape it also carries a node reference so
//! the backward pass can reach it; tensors without a node are plain
//! values and are safe to share across threads.

use std::sync::Arc;

use crate::autodiff::graph::{Graph, NodeId};
use crate::scalar::Scalar;

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<S>>,
    pub(crate) node: Option<NodeId>,
    pub(crate) graph: Option<Graph<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Self {
        Self::from_arc(shape, Arc::new(data))
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<S>>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            node: None,
            graph: None,
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Self {
        Self::from_vec(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![S::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: S) -> Self {
        Self::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn item_f64(&self) -> f64 {
        self.item().as_f64()
    }

    /// True when this tensor is recorded on a tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape reference; gradients stop here.
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            graph: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.is_tracked())
            .field("data", &self.data)
            .finish()
    }
}
