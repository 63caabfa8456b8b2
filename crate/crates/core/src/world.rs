//! The predictive world model.
//!
//! A shared convolutional encoder turns the observation stack into an
//! embedding that drives two disjoint pools of recurrent modules: the
//! current branch tracks the state the agent actually reached, the
//! expectation branch emits a prediction for the next step before it is
//! observed. The mean squared gap between the realized state and the
//! previous prediction is the intrinsic reward; the same quantity, with
//! the realized state treated as a constant target, is the regression
//! loss that trains the expectation branch and the encoder.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::brim::{BrimConfig, BrimStack, StackState};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{ParamStore, Vars};
use crate::rim::RimConfig;
use crate::scalar::Scalar;

/// Layout of the model; mirrored by the run config.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    /// Frames in the observation stack (input channels).
    pub obs_channels: usize,
    /// Observation height and width.
    pub obs_size: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub embedding_dim: usize,
    /// Stack depth per branch.
    pub layers: usize,
    /// Modules per branch pool and how many of them activate per step.
    pub pool_modules: usize,
    pub pool_active: usize,
    pub module_size: usize,
    pub sel_key_dim: usize,
    pub sel_value_dim: usize,
    pub com_key_dim: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            obs_channels: 4,
            obs_size: 84,
            conv_channels: vec![16, 32, 32],
            conv_kernels: vec![8, 4, 3],
            conv_strides: vec![4, 2, 1],
            embedding_dim: 128,
            layers: 1,
            pool_modules: 4,
            pool_active: 2,
            module_size: 32,
            sel_key_dim: 64,
            sel_value_dim: 64,
            com_key_dim: 32,
        }
    }
}

impl WorldConfig {
    pub fn brim_config(&self) -> BrimConfig {
        let mut layers = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            layers.push(RimConfig {
                n_modules: self.pool_modules,
                n_active: self.pool_active,
                module_size: self.module_size,
                input_dim: if l == 0 {
                    self.embedding_dim
                } else {
                    self.module_size
                },
                sel_key_dim: self.sel_key_dim,
                sel_value_dim: self.sel_value_dim,
                com_key_dim: self.com_key_dim,
            });
        }
        BrimConfig { layers }
    }

    /// Width of each branch's concatenated read-out.
    pub fn branch_width(&self) -> usize {
        self.pool_modules * self.module_size
    }
}

// ── pixel encoder ────────────────────────────────────────────────────

/// Convolution stack with max(x,0) nonlinearities followed by one linear
/// map to the embedding.
pub struct PixelEncoder {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub in_shape: [usize; 3],
    pub embedding_dim: usize,
}

impl PixelEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &WorldConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.conv_channels.len() != cfg.conv_kernels.len()
            || cfg.conv_channels.len() != cfg.conv_strides.len()
        {
            return Err(Error::Config(
                "conv channels/kernels/strides must have equal lengths".into(),
            ));
        }
        let mut convs = Vec::new();
        let mut channels = cfg.obs_channels;
        let mut side = cfg.obs_size;
        for (i, ((&out, &k), &stride)) in cfg
            .conv_channels
            .iter()
            .zip(&cfg.conv_kernels)
            .zip(&cfg.conv_strides)
            .enumerate()
        {
            if k > side || stride == 0 {
                return Err(Error::Config(format!(
                    "conv layer {i}: kernel {k} does not fit a {side}x{side} input"
                )));
            }
            convs.push(Conv2d::new(
                store,
                &format!("{name}.conv{i}"),
                channels,
                out,
                k,
                stride,
                rng,
            ));
            channels = out;
            side = (side - k) / stride + 1;
        }
        let flat = channels * side * side;
        let fc = Linear::new(store, &format!("{name}.fc"), flat, cfg.embedding_dim, rng);
        Ok(PixelEncoder {
            convs,
            fc,
            in_shape: [cfg.obs_channels, cfg.obs_size, cfg.obs_size],
            embedding_dim: cfg.embedding_dim,
        })
    }

    pub fn encode<S: Scalar>(&self, vars: &Vars<S>, obs: &Tensor<S>) -> Result<Tensor<S>> {
        if obs.shape() != self.in_shape {
            return Err(Error::Shape {
                op: "encode",
                lhs: obs.shape().to_vec(),
                rhs: self.in_shape.to_vec(),
            });
        }
        let mut x = obs.clone();
        for conv in &self.convs {
            x = conv.forward(vars, &x)?.relu();
        }
        let flat = x.numel();
        Ok(self.fc.forward(vars, &x.reshape(vec![flat])))
    }
}

// ── dual-branch world model ──────────────────────────────────────────

pub struct WorldModel {
    pub encoder: PixelEncoder,
    /// Current-state branch; its read-out feeds the policy.
    pub current: BrimStack,
    /// Expectation branch; its read-out is the prediction for the next
    /// step.
    pub expected: BrimStack,
    pub cfg: WorldConfig,
}

/// Recurrent state of both branches plus the standing prediction.
#[derive(Clone)]
pub struct WorldState<S: Scalar> {
    pub current: StackState<S>,
    pub expected: StackState<S>,
    /// Prediction emitted at the previous step; `None` right after a
    /// reset, which defines the first intrinsic reward of an episode
    /// as zero.
    pub prev_expectation: Option<Tensor<S>>,
}

/// Everything one step of the world model produces.
pub struct WorldStep<S: Scalar> {
    pub embedding: Tensor<S>,
    pub h_current: Tensor<S>,
    pub h_expected: Tensor<S>,
    pub intrinsic_reward: f64,
}

impl WorldModel {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: WorldConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = PixelEncoder::new(store, "world.encoder", &cfg, rng)?;
        let current = BrimStack::new(store, "world.current", cfg.brim_config(), rng)?;
        let expected = BrimStack::new(store, "world.expected", cfg.brim_config(), rng)?;
        Ok(WorldModel {
            encoder,
            current,
            expected,
            cfg,
        })
    }

    /// Fresh zero state, used at episode boundaries.
    pub fn zero_state<S: Scalar>(&self) -> WorldState<S> {
        WorldState {
            current: StackState::zeros(&self.current.cfg),
            expected: StackState::zeros(&self.expected.cfg),
            prev_expectation: None,
        }
    }

    /// Advances both branches on one observation. The intrinsic reward
    /// compares the realized read-out with the prediction stored at the
    /// previous step, before the new prediction replaces it.
    pub fn world_step<S: Scalar>(
        &self,
        vars: &Vars<S>,
        state: &mut WorldState<S>,
        obs: &Tensor<S>,
    ) -> Result<WorldStep<S>> {
        let embedding = self.encoder.encode(vars, obs)?;
        state.current = self.current.stack_step(vars, &state.current, &embedding)?;
        let h_current = self.current.read_top(&state.current);
        let intrinsic = match &state.prev_expectation {
            Some(prev) => intrinsic_reward(&h_current, prev)?,
            None => 0.0,
        };
        state.expected = self.expected.stack_step(vars, &state.expected, &embedding)?;
        let h_expected = self.expected.read_top(&state.expected);
        state.prev_expectation = Some(h_expected.clone());
        Ok(WorldStep {
            embedding,
            h_current,
            h_expected,
            intrinsic_reward: intrinsic,
        })
    }
}

/// Mean squared difference between the realized read-out and the prior
/// prediction. Not standardized or clipped afterwards.
pub fn intrinsic_reward<S: Scalar>(h_current: &Tensor<S>, h_prev: &Tensor<S>) -> Result<f64> {
    if h_current.shape() != h_prev.shape() {
        return Err(Error::Shape {
            op: "intrinsic_reward",
            lhs: h_current.shape().to_vec(),
            rhs: h_prev.shape().to_vec(),
        });
    }
    let mut acc = 0.0f64;
    for (a, b) in h_current.data().iter().zip(h_prev.data()) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    Ok(acc / h_current.numel() as f64)
}

/// The differentiable counterpart of [`intrinsic_reward`]: same formula,
/// with the realized read-out detached so the regression trains only the
/// expectation branch and the encoder.
pub fn world_loss<S: Scalar>(h_current: &Tensor<S>, h_prev: &Tensor<S>) -> Result<Tensor<S>> {
    if h_current.shape() != h_prev.shape() {
        return Err(Error::Shape {
            op: "world_loss",
            lhs: h_current.shape().to_vec(),
            rhs: h_prev.shape().to_vec(),
        });
    }
    let diff = h_current.detach().sub(h_prev);
    Ok(diff.mul(&diff).mean())
}
