//! Curiosity-driven reinforcement learning with a sparse, modular,
//! attention-routed recurrent world model.
//!
//! The agent is trained purely on intrinsic rewards: a predictive world
//! model maintains two pools of recurrent modules — one tracking the
//! current state, one predicting the next — and the squared gap between
//! prediction and reality becomes the reward a PPO policy maximizes.
//! Everything runs on a small built-in reverse-mode autodiff engine, on
//! CPU, over pixel observations from built-in environments or external
//! emulators attached over a wire protocol.

pub mod autodiff;
pub mod brim;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rim;
pub mod scalar;
pub mod seeding;
pub mod world;

pub use autodiff::{backward, Gradients, Graph, Tensor};
pub use error::{Error, Result};
pub use scalar::Scalar;
