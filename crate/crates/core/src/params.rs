//! Central parameter storage.
//!
//! Every trainable parameter lives in one [`ParamStore`], identified by a
//! stable [`ParamId`] and a unique name. Per training step the store is
//! attached to a fresh tape ([`ParamStore::attach`]); rollout collection
//! uses tape-free views ([`ParamStore::constants`]). The optimizer and the
//! checkpoint format walk the store in id order.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry<S: Scalar> {
    name: String,
    shape: Vec<usize>,
    data: Vec<S>,
}

pub struct ParamStore<S: Scalar> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> ParamId {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter {name}: shape/buffer mismatch");
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, shape, data });
        ParamId(self.entries.len() - 1)
    }

    /// Weights drawn from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, shape, vec![S::zero(); numel])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].data
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Tracked leaf view: one leaf per parameter, registered on `graph`
    /// in id order.
    pub fn attach(&self, graph: &Graph<S>) -> Vars<S> {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let t = Tensor::from_arc(e.shape.clone(), Arc::new(e.data.clone()));
                graph.leaf(&t)
            })
            .collect();
        Vars { tensors }
    }

    /// Tape-free view for rollouts and evaluation.
    pub fn constants(&self) -> Vars<S> {
        let tensors = self
            .entries
            .iter()
            .map(|e| Tensor::from_arc(e.shape.clone(), Arc::new(e.data.clone())))
            .collect();
        Vars { tensors }
    }

    /// `(name, shape, f64 values)` records in id order, the checkpoint
    /// payload.
    pub fn records(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.shape.clone(),
                    e.data.iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect()
    }

    /// Replaces parameter values from checkpoint records, matching by
    /// name and validating shapes.
    pub fn load_records(&mut self, records: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.entries.len(),
                records.len()
            )));
        }
        for (name, shape, values) in records {
            let entry = self
                .entries
                .iter_mut()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if &entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match checkpoint {:?}",
                    entry.shape, shape
                )));
            }
            entry.data = values.iter().map(|&v| S::from_f64(v)).collect();
        }
        Ok(())
    }
}

/// A consistent view of all parameters, either tracked on one tape or
/// tape-free. Forward passes index it by [`ParamId`].
pub struct Vars<S: Scalar> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Vars<S> {
    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    /// Per-parameter gradients in id order; unreached parameters come
    /// back as exact zeros.
    pub fn gradients(&self, grads: &Gradients<S>) -> Vec<Vec<S>> {
        self.tensors.iter().map(|t| grads.get_or_zeros(t)).collect()
    }
}
