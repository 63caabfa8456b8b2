//! The tape: an append-only record of operations for reverse-mode
//! differentiation.
//!
//! Node ids are assigned in forward order, so every node's operands have
//! smaller ids and a single reverse sweep visits each node exactly once.
//! A tape can be consumed by `backward` once; a second call is a usage
//! error.

use std::sync::{Arc, Mutex};

use crate::autodiff::ops::Op;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

pub struct Graph<S: Scalar> {
    inner: Arc<Mutex<GraphState<S>>>,
}

struct GraphState<S: Scalar> {
    nodes: Vec<Op<S>>,
    consumed: bool,
}

impl<S: Scalar> Clone for Graph<S> {
    fn clone(&self) -> Self {
        Graph {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            inner: Arc::new(Mutex::new(GraphState {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn same(&self, other: &Graph<S>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn node_count(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    /// Registers a tensor as a differentiable leaf and returns the
    /// tracked handle. The data buffer is shared, not copied.
    pub fn leaf(&self, t: &Tensor<S>) -> Tensor<S> {
        let id = self.push(Op::Leaf);
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(id),
            graph: Some(self.clone()),
        }
    }

    pub(crate) fn record(&self, op: Op<S>, shape: Vec<usize>, data: Arc<Vec<S>>) -> Tensor<S> {
        let id = self.push(op);
        Tensor {
            shape,
            data,
            node: Some(id),
            graph: Some(self.clone()),
        }
    }

    fn push(&self, op: Op<S>) -> NodeId {
        let mut st = self.inner.lock().unwrap();
        st.nodes.push(op);
        st.nodes.len() - 1
    }
}

/// Per-leaf gradients produced by [`backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient buffer for a tracked tensor; `None` when the tensor was
    /// never reached by the backward sweep.
    pub fn get(&self, t: &Tensor<S>) -> Option<&[S]> {
        let id = t.node?;
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient for a tracked tensor, with unreached leaves reported as
    /// exact zeros.
    pub fn get_or_zeros(&self, t: &Tensor<S>) -> Vec<S> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); t.numel()],
        }
    }
}

/// Reverse sweep from a scalar loss; returns the gradient of the loss
/// with respect to every leaf that the loss depends on.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<Gradients<S>> {
    let graph = loss
        .graph
        .as_ref()
        .ok_or_else(|| Error::Usage("backward: loss is not recorded on any tape".into()))?;
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward: loss must be a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let loss_id = loss.node.expect("tracked tensor has a node");

    let mut st = graph.inner.lock().unwrap();
    if st.consumed {
        return Err(Error::TapeConsumed);
    }
    st.consumed = true;

    let mut adjoints: Vec<Option<Vec<S>>> = vec![None; st.nodes.len()];
    adjoints[loss_id] = Some(vec![S::one()]);

    for id in (0..=loss_id).rev() {
        if matches!(st.nodes[id], Op::Leaf) {
            continue;
        }
        let Some(adj) = adjoints[id].take() else {
            continue;
        };
        let (done, pending) = adjoints.split_at_mut(id);
        let _ = pending;
        st.nodes[id].backward(&adj, &mut |target: NodeId, contrib: Vec<S>| {
            debug_assert!(target < id, "tape out of topological order");
            match &mut done[target] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += *c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        });
    }

    Ok(Gradients { grads: adjoints })
}
