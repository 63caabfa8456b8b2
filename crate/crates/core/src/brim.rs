//! Multi-layer composition of RIM layers with bidirectional links.
//!
//! Layers are updated in ascending order within a timestep, so a layer
//! reads the layer below at the current step and the layer above at the
//! previous step; the embedding serves as the lower layer for the first
//! layer and the deepest layer has no top-down source. There is no
//! iteration to convergence.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Vars};
use crate::rim::{LayerState, RimConfig, RimLayer};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct BrimConfig {
    /// Bottom layer first. `layers[0].input_dim` is the embedding width;
    /// every higher layer's `input_dim` must equal the module size of
    /// the layer below.
    pub layers: Vec<RimConfig>,
}

impl BrimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("stack needs at least one layer".into()));
        }
        for cfg in &self.layers {
            cfg.validate()?;
        }
        for l in 1..self.layers.len() {
            if self.layers[l].input_dim != self.layers[l - 1].module_size {
                return Err(Error::Config(format!(
                    "layer {l} input width {} does not match layer {} module size {}",
                    self.layers[l].input_dim,
                    l - 1,
                    self.layers[l - 1].module_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct StackState<S: Scalar> {
    pub layers: Vec<LayerState<S>>,
}

impl<S: Scalar> StackState<S> {
    pub fn zeros(cfg: &BrimConfig) -> Self {
        StackState {
            layers: cfg
                .layers
                .iter()
                .map(|l| LayerState::zeros(l.n_modules, l.module_size))
                .collect(),
        }
    }
}

pub struct BrimStack {
    pub cfg: BrimConfig,
    layers: Vec<RimLayer>,
}

impl BrimStack {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: BrimConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let count = cfg.layers.len();
        let mut layers = Vec::with_capacity(count);
        for (l, layer_cfg) in cfg.layers.iter().enumerate() {
            let top_dim = if l + 1 < count {
                Some(cfg.layers[l + 1].module_size)
            } else {
                None
            };
            layers.push(RimLayer::new(
                store,
                &format!("{name}.layer{l}"),
                layer_cfg.clone(),
                top_dim,
                rng,
            )?);
        }
        Ok(BrimStack { cfg, layers })
    }

    pub fn layer(&self, l: usize) -> &RimLayer {
        &self.layers[l]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Advances every layer one step on the encoder output for time t.
    /// Ascending order makes bottom-up links same-step and top-down
    /// links previous-step: when layer `l` runs, `l-1` already holds its
    /// time-t state while `l+1` still holds time t-1.
    pub fn stack_step<S: Scalar>(
        &self,
        vars: &Vars<S>,
        state: &StackState<S>,
        embedding: &Tensor<S>,
    ) -> Result<StackState<S>> {
        let count = self.layers.len();
        let mut out = state.clone();
        for l in 0..count {
            let next = {
                let bottom: Vec<&Tensor<S>> = if l == 0 {
                    vec![embedding]
                } else {
                    out.layers[l - 1].hidden.iter().collect()
                };
                let top: Option<Vec<&Tensor<S>>> = if l + 1 < count {
                    Some(out.layers[l + 1].hidden.iter().collect())
                } else {
                    None
                };
                self.layers[l].step(vars, &out.layers[l], &bottom, top.as_deref())?
            };
            out.layers[l] = next;
        }
        Ok(out)
    }

    /// All module hidden vectors of one layer concatenated in ascending
    /// module order.
    pub fn read_concat<S: Scalar>(&self, state: &StackState<S>, layer: usize) -> Tensor<S> {
        assert!(layer < self.layers.len(), "layer index out of range");
        let refs: Vec<&Tensor<S>> = state.layers[layer].hidden.iter().collect();
        Tensor::concat(&refs)
    }

    /// Concatenated hidden state of the deepest layer, the stack output.
    pub fn read_top<S: Scalar>(&self, state: &StackState<S>) -> Tensor<S> {
        self.read_concat(state, self.layers.len() - 1)
    }

    /// Width of [`Self::read_top`].
    pub fn top_width(&self) -> usize {
        let top = self.cfg.layers.last().expect("stack has layers");
        top.n_modules * top.module_size
    }
}
