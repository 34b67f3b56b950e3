use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::learners::learner_names;
use crate::approximators::{ActorConfig, QConfig, ScoreConfig};
use crate::critic::{CriticConfig, Regularizer};
use crate::datasets::{ReturnKind, Thresholds};
use crate::diffusion_policy::{Guidance, QNormMode};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};

pub const CONFIG_VERSION: u32 = 1;

/// How per-agent random streams are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentStreams {
    /// Agent `j` draws from stream `j` of the run seed.
    #[default]
    Distinct,
    /// Every agent draws from stream 0; agents then differ only through their data.
    Shared,
}

/// Versioned training configuration. Omitted fields take their defaults;
/// unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub algo: String,
    pub gamma: f64,
    /// Soft target-update rate.
    pub rho: f64,
    /// Conservative regularizer weight.
    pub zeta: f64,
    /// Q-guidance weight; required by `dom2`, forced to zero by `diff_bc`.
    pub eta: Option<f64>,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Uniform actions per observation in the conservative regularizer.
    pub cql_samples: usize,
    pub q_norm_mode: QNormMode,
    pub guidance: Guidance,
    pub regularizer: Regularizer,
    pub seed: u64,
    pub agent_streams: AgentStreams,
    /// Augmentation thresholds, applied once before training for every algorithm.
    pub thresholds: Option<Thresholds>,
    pub return_kind: ReturnKind,
    pub score_hidden: usize,
    pub score_blocks: usize,
    pub score_dropout: f64,
    pub q_hidden: usize,
    pub actor_hidden: usize,
    pub metrics_every: u64,
    /// Steps between in-training evaluations; 0 disables them.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Evaluation environment; defaults to the dataset's.
    pub eval_env: Option<String>,
    /// Steps between periodic checkpoints written by [`super::run_training`]; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            algo: "dom2".into(),
            gamma: 0.95,
            rho: 0.005,
            zeta: 5.0,
            eta: None,
            diffusion_steps: 5,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            batch_size: 256,
            total_steps: 50_000,
            lr_actor: 5e-3,
            lr_critic: 3e-4,
            cql_samples: 10,
            q_norm_mode: QNormMode::Abs,
            guidance: Guidance::First,
            regularizer: Regularizer::Literal,
            seed: 0,
            agent_streams: AgentStreams::Distinct,
            thresholds: None,
            return_kind: ReturnKind::Joint,
            score_hidden: 256,
            score_blocks: 3,
            score_dropout: 0.1,
            q_hidden: 256,
            actor_hidden: 256,
            metrics_every: 100,
            eval_every: 1000,
            eval_episodes: 20,
            eval_env: None,
            checkpoint_every: 0,
        }
    }
}

fn rate(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl TrainConfig {
    /// Parses JSON text. A missing `version` is a schema error and a
    /// different one a version error, both reported before any other field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::schema(format!("config is not JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::schema("config must be a JSON object"))?;
        let version = obj
            .get("version")
            .ok_or_else(|| Error::schema("config has no version field"))?;
        let found = version
            .as_u64()
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| Error::schema(format!("config version {version} is not an integer")))?;
        if found != CONFIG_VERSION {
            return Err(Error::Version {
                found,
                expected: CONFIG_VERSION,
            });
        }
        let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::schema(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !learner_names().contains(&self.algo.as_str()) {
            return Err(Error::Lookup {
                kind: "algorithm",
                name: self.algo.clone(),
            });
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        rate("rho", self.rho)?;
        rate("lr_actor", self.lr_actor)?;
        rate("lr_critic", self.lr_critic)?;
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::config("zeta must be finite and nonnegative"));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::config("eta must be finite and nonnegative"));
            }
        }
        if self.algo == "dom2" && (self.eta.is_none() || self.thresholds.is_none()) {
            return Err(Error::config("dom2 needs both eta and thresholds"));
        }
        for (name, v) in [
            ("diffusion_steps", self.diffusion_steps),
            ("batch_size", self.batch_size),
            ("cql_samples", self.cql_samples),
            ("score_hidden", self.score_hidden),
            ("q_hidden", self.q_hidden),
            ("actor_hidden", self.actor_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.metrics_every == 0 {
            return Err(Error::config("metrics_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.score_dropout) {
            return Err(Error::config("score_dropout must lie in [0, 1)"));
        }
        if let Some(env) = &self.eval_env {
            env.parse::<crate::envs::EnvId>()?;
        }
        self.schedule()?;
        Ok(())
    }

    /// Q-guidance weight actually used by the selected algorithm.
    pub fn effective_eta(&self) -> f64 {
        match self.algo.as_str() {
            "dom2" => self.eta.unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.diffusion_steps, self.beta_min, self.beta_max)
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            gamma: self.gamma,
            zeta: self.zeta,
            samples: self.cql_samples,
            regularizer: self.regularizer,
        }
    }

    pub fn score_config(&self, obs_dim: usize, act_dim: usize) -> ScoreConfig {
        ScoreConfig {
            obs_dim,
            act_dim,
            steps: self.diffusion_steps,
            hidden: self.score_hidden,
            blocks: self.score_blocks,
            dropout: self.score_dropout,
        }
    }

    pub fn q_config(&self, obs_dim: usize, act_dim: usize) -> QConfig {
        QConfig {
            obs_dim,
            act_dim,
            hidden: self.q_hidden,
        }
    }

    pub fn actor_config(&self, obs_dim: usize, act_dim: usize) -> ActorConfig {
        ActorConfig {
            obs_dim,
            act_dim,
            hidden: self.actor_hidden,
        }
    }
}
