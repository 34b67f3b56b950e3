//! Offline multi-agent reinforcement learning with diffusion policies.
//!
//! Each agent's policy denoises Gaussian noise into an action with a
//! first-order DPM-solver over a variance-preserving schedule, trained with a
//! score-matching loss plus a normalized Q-guidance term against conservative
//! twin critics. High-return trajectories are replicated before training.

pub mod approximators;
pub mod critic;
pub mod datasets;
pub mod diffusion_policy;
pub mod envs;
pub mod error;
pub mod evaluation;
pub mod schedule;
pub mod tape;
pub mod training;

pub use error::{Error, Result};

/// The random stream used everywhere; its state serializes into checkpoints.
pub type SimRng = rand_chacha::ChaCha8Rng;
