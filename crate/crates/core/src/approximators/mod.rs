//! Differentiable function approximators and their shared contracts: flat
//! parameter vectors with a named-shape manifest, soft target updates, Adam,
//! and finite-difference gradient checks.

mod actor;
mod gradcheck;
mod optim;
mod params;
mod qnet;
mod score;

pub use actor::{ActorConfig, DeterministicActor};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP, RELATIVE_FLOOR};
pub use optim::Adam;
pub use params::{soft_update, BoundParams, ParamSet, ParamShape};
pub use qnet::{BatchStats, Norm, QConfig, QNetwork, BN_MOMENTUM};
pub use score::{step_embedding, ScoreConfig, ScoreNetwork, EMBED_DIM};

use crate::SimRng;

/// Forward-pass mode for networks with stochastic layers.
pub enum Mode<'a> {
    /// Dropout off; deterministic.
    Eval,
    /// Dropout on, masks drawn from the given stream.
    Train(&'a mut SimRng),
}

impl Mode<'_> {
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }
}
