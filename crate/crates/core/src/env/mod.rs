//! Environments and the observation pipeline.
//!
//! Built-in pixel environments plus a wire protocol for attaching
//! external emulators. The pipeline applies 4-frame action repeat,
//! grayscale 84x84 resizing, /255 normalization and 4-frame stacking;
//! parallel streams auto-reset with per-stream episode seeds derived
//! from the run seed.

pub mod dodge;
pub mod gridquest;
pub mod preprocess;
pub mod wire;

pub use dodge::DodgeEnv;
pub use gridquest::GridQuestEnv;
pub use preprocess::{preprocess, OBS_SIZE};
pub use wire::ExternalEnv;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::derive_seed;

/// Raw RGB frame, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), 3 * width * height, "frame buffer size mismatch");
        Frame { width, height, rgb }
    }
}

pub struct StepOutcome {
    pub frame: Frame,
    pub reward: f64,
    pub done: bool,
}

/// A pixel environment. Deterministic: the reset seed and the action
/// sequence fully determine every frame and reward. After `done` the
/// environment must be reset before the next step.
pub trait Environment: Send {
    fn action_count(&self) -> usize;
    /// (width, height) of the raw frames.
    fn frame_size(&self) -> (usize, usize);
    fn reset(&mut self, seed: u64) -> Result<Frame>;
    fn step(&mut self, action: usize) -> Result<StepOutcome>;
    /// Discrete state fingerprint for exploration accounting, when the
    /// environment supports one.
    fn state_hash(&self) -> Option<u64> {
        None
    }
}

/// Builds an environment from its config name: `gridquest`, `dodge`, or
/// `external:<host:port>`.
pub fn make_env(spec: &str) -> Result<Box<dyn Environment>> {
    if let Some(endpoint) = spec.strip_prefix("external:") {
        return Ok(Box::new(ExternalEnv::connect(
            endpoint,
            std::time::Duration::from_secs(30),
        )?));
    }
    match spec {
        "gridquest" => Ok(Box::new(GridQuestEnv::new())),
        "dodge" => Ok(Box::new(DodgeEnv::new())),
        other => Err(Error::Config(format!(
            "unknown environment '{other}' (expected gridquest, dodge, or external:<endpoint>)"
        ))),
    }
}

/// Repeats `action` up to `skip` times (stopping early on episode end),
/// summing rewards and returning the last frame.
pub fn frameskip_step(
    env: &mut dyn Environment,
    action: usize,
    skip: usize,
) -> Result<(Frame, f64, bool)> {
    assert!(skip >= 1, "frameskip must be at least 1");
    let mut total = 0.0;
    let mut out = env.step(action)?;
    total += out.reward;
    for _ in 1..skip {
        if out.done {
            break;
        }
        out = env.step(action)?;
        total += out.reward;
    }
    Ok((out.frame, total, out.done))
}

/// Four stacked preprocessed frames, newest last; on reset the stack is
/// the first frame repeated.
#[derive(Clone)]
pub struct ObsStack<S: Scalar> {
    depth: usize,
    frames: Vec<Vec<S>>,
}

impl<S: Scalar> ObsStack<S> {
    pub fn from_first(depth: usize, first: Vec<S>) -> Self {
        assert!(depth >= 1);
        ObsStack {
            depth,
            frames: vec![first; depth],
        }
    }

    pub fn push(&mut self, frame: Vec<S>) {
        self.frames.remove(0);
        self.frames.push(frame);
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn frame(&self, i: usize) -> &[S] {
        &self.frames[i]
    }

    /// `[depth × 84 × 84]` tensor view of the stack.
    pub fn to_tensor(&self) -> Tensor<S> {
        let mut data = Vec::with_capacity(self.depth * OBS_SIZE * OBS_SIZE);
        for f in &self.frames {
            data.extend_from_slice(f);
        }
        Tensor::from_vec(vec![self.depth, OBS_SIZE, OBS_SIZE], data)
    }
}

/// Episode bookkeeping returned when a stream finishes an episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStats {
    /// Accumulated extrinsic score.
    pub score: f64,
    /// Length in agent steps.
    pub length: usize,
}

/// Result of one agent step of a stream.
pub struct StreamStep {
    /// Extrinsic reward summed over the skipped frames.
    pub reward: f64,
    pub done: bool,
    /// State fingerprints observed this step (post-step, plus the reset
    /// state when an auto-reset fired).
    pub visited: Vec<u64>,
    pub finished: Option<EpisodeStats>,
}

/// One environment stream: action repeat, preprocessing, frame stacking,
/// the episode-length cap, and auto-reset with derived episode seeds.
pub struct EnvStream<S: Scalar> {
    env: Box<dyn Environment>,
    stack: ObsStack<S>,
    frame_skip: usize,
    frame_stack: usize,
    episode_cap: usize,
    run_seed: u64,
    seed_salt: u64,
    stream_index: usize,
    episode_index: u64,
    agent_steps: usize,
    score: f64,
}

impl<S: Scalar> EnvStream<S> {
    pub fn new(
        env: Box<dyn Environment>,
        frame_skip: usize,
        frame_stack: usize,
        episode_cap: usize,
        run_seed: u64,
        seed_salt: u64,
        stream_index: usize,
    ) -> Result<Self> {
        let mut stream = EnvStream {
            env,
            stack: ObsStack::from_first(frame_stack, vec![S::zero(); OBS_SIZE * OBS_SIZE]),
            frame_skip,
            frame_stack,
            episode_cap,
            run_seed,
            seed_salt,
            stream_index,
            episode_index: 0,
            agent_steps: 0,
            score: 0.0,
        };
        stream.begin_episode()?;
        Ok(stream)
    }

    fn episode_seed(&self) -> u64 {
        derive_seed(
            self.run_seed,
            &[self.seed_salt, self.stream_index as u64, self.episode_index],
        )
    }

    fn begin_episode(&mut self) -> Result<()> {
        let first = self.env.reset(self.episode_seed())?;
        self.stack = ObsStack::from_first(self.frame_stack, preprocess(&first)?);
        self.agent_steps = 0;
        self.score = 0.0;
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.env.action_count()
    }

    pub fn observation(&self) -> &ObsStack<S> {
        &self.stack
    }

    pub fn obs_tensor(&self) -> Tensor<S> {
        self.stack.to_tensor()
    }

    pub fn state_hash(&self) -> Option<u64> {
        self.env.state_hash()
    }

    pub fn step(&mut self, action: usize) -> Result<StreamStep> {
        let (frame, reward, env_done) =
            frameskip_step(self.env.as_mut(), action, self.frame_skip)?;
        self.stack.push(preprocess(&frame)?);
        self.agent_steps += 1;
        self.score += reward;

        let mut visited = Vec::new();
        if let Some(h) = self.env.state_hash() {
            visited.push(h);
        }
        let done = env_done || self.agent_steps >= self.episode_cap;
        let finished = if done {
            let stats = EpisodeStats {
                score: self.score,
                length: self.agent_steps,
            };
            self.episode_index += 1;
            self.begin_episode()?;
            if let Some(h) = self.env.state_hash() {
                visited.push(h);
            }
            Some(stats)
        } else {
            None
        };
        Ok(StreamStep {
            reward,
            done,
            visited,
            finished,
        })
    }
}

/// Batched stepping over independent streams, gathered in stream order.
pub struct VecEnv<S: Scalar> {
    pub streams: Vec<EnvStream<S>>,
}

impl<S: Scalar> VecEnv<S> {
    pub fn new(streams: Vec<EnvStream<S>>) -> Self {
        assert!(!streams.is_empty(), "need at least one stream");
        VecEnv { streams }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.streams[0].action_count()
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<Vec<StreamStep>> {
        assert_eq!(actions.len(), self.streams.len(), "one action per stream");
        self.streams
            .iter_mut()
            .zip(actions)
            .map(|(s, &a)| s.step(a))
            .collect()
    }
}
