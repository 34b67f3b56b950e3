//! The training loop: augment once, then for every step and every agent one
//! critic update, one actor update and one soft target update, in that order.

mod checkpoint;
mod config;
mod learners;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{AgentHeader, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_VERSION, MAGIC};
pub use config::{AgentStreams, TrainConfig, CONFIG_VERSION};
pub use learners::{
    learner_entry, learner_names, ActorDiagnostics, AgentState, CqlLearner, DiffusionLearner, Learner, LearnerEntry,
    LearnerSpec, UpdateCounters,
};

use crate::datasets::{Dataset, TransitionIndex};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::evaluation::{rollout, JointPolicy};
use crate::tape::Matrix;
use crate::SimRng;

/// One line of the metrics stream. Training records carry an agent and its
/// latest losses; evaluation records carry only the return statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub agent: Option<usize>,
    pub bc_loss: Option<f64>,
    pub q_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub mean_q_data: Option<f64>,
    pub mean_q_random: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
}

impl MetricsRecord {
    fn empty(step: u64) -> Self {
        MetricsRecord {
            step,
            agent: None,
            bc_loss: None,
            q_loss: None,
            critic_loss: None,
            mean_q_data: None,
            mean_q_random: None,
            eval_return_mean: None,
            eval_return_std: None,
        }
    }
}

/// Joint policy over one learner per agent.
pub struct LearnerPolicy<'a> {
    learners: &'a [Box<dyn Learner>],
    obs_dim: usize,
}

impl JointPolicy for LearnerPolicy<'_> {
    fn n_agents(&self) -> usize {
        self.learners.len()
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn act(&self, obs: &[Matrix], greedy: bool, rng: &mut SimRng) -> Result<Vec<Matrix>> {
        let envs = obs.len();
        let mut out: Vec<Option<Matrix>> = vec![None; envs];
        for (j, learner) in self.learners.iter().enumerate() {
            let rows = Matrix::from_shape_fn((envs, self.obs_dim), |(e, c)| obs[e][[j, c]]);
            let acts = learner.act(&rows, greedy, rng)?;
            for (e, slot) in out.iter_mut().enumerate() {
                let m = slot.get_or_insert_with(|| Matrix::zeros((self.learners.len(), acts.ncols())));
                m.row_mut(j).assign(&acts.row(e));
            }
        }
        Ok(out.into_iter().map(|m| m.expect("at least one agent")).collect())
    }
}

/// Learners restored from a checkpoint, for evaluation.
pub struct TrainedPolicy {
    header: CheckpointHeader,
    learners: Vec<Box<dyn Learner>>,
}

impl TrainedPolicy {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        let entry = learner_entry(&h.config.algo)?;
        let spec = LearnerSpec {
            config: &h.config,
            obs_dim: h.obs_dim,
            act_dim: h.act_dim,
        };
        let learners = ckpt
            .agents
            .iter()
            .map(|a| (entry.restore)(&spec, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedPolicy {
            header: h.clone(),
            learners,
        })
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn policy(&self) -> LearnerPolicy<'_> {
        LearnerPolicy {
            learners: &self.learners,
            obs_dim: self.header.obs_dim,
        }
    }
}

fn agent_rng(config: &TrainConfig, agent: usize) -> SimRng {
    let mut rng = SimRng::seed_from_u64(config.seed);
    rng.set_stream(match config.agent_streams {
        AgentStreams::Distinct => agent as u64,
        AgentStreams::Shared => 0,
    });
    rng
}

/// Seed of the evaluation at `step`; independent of the training streams.
pub fn eval_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub struct Trainer {
    config: TrainConfig,
    env_id: EnvId,
    index: TransitionIndex,
    learners: Vec<Box<dyn Learner>>,
    rngs: Vec<SimRng>,
    step: u64,
    last: Vec<MetricsRecord>,
}

impl Trainer {
    /// Builds learners in agent order, each from its own stream, and
    /// augments the dataset with the configured thresholds.
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let mut rngs: Vec<SimRng> = (0..dataset.manifest().n_agents)
            .map(|j| agent_rng(&config, j))
            .collect();
        let entry = learner_entry(&config.algo)?;
        let m = dataset.manifest();
        let spec = LearnerSpec {
            config: &config,
            obs_dim: m.obs_dim,
            act_dim: m.act_dim,
        };
        let learners = rngs
            .iter_mut()
            .map(|rng| (entry.create)(&spec, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(config, dataset, learners, rngs, 0)
    }

    /// Continues from a checkpoint. `config` may differ from the stored one
    /// only in `total_steps`.
    pub fn resume(ckpt: &Checkpoint, config: Option<TrainConfig>, dataset: &Dataset) -> Result<Self> {
        let h = &ckpt.header;
        let m = dataset.manifest();
        if (h.n_agents, h.obs_dim, h.act_dim) != (m.n_agents, m.obs_dim, m.act_dim) {
            return Err(Error::Dimension(format!(
                "checkpoint has {} agents with obs dim {} and act dim {}; dataset has {}, {}, {}",
                h.n_agents, h.obs_dim, h.act_dim, m.n_agents, m.obs_dim, m.act_dim
            )));
        }
        if h.env_id != m.env_id {
            return Err(Error::contract(format!(
                "checkpoint was trained on {}, dataset is {}",
                h.env_id, m.env_id
            )));
        }
        let config = match config {
            Some(c) => {
                let same = TrainConfig {
                    total_steps: h.config.total_steps,
                    ..c.clone()
                };
                if same != h.config {
                    return Err(Error::config(
                        "resume config differs from the checkpoint beyond total_steps",
                    ));
                }
                c
            }
            None => h.config.clone(),
        };
        if h.schedule != config.schedule()?.descriptor() {
            return Err(Error::schema("checkpoint schedule disagrees with its configuration"));
        }
        let policy = TrainedPolicy::from_checkpoint(ckpt)?;
        Self::assemble(config, dataset, policy.learners, h.rngs.clone(), h.step)
    }

    fn assemble(
        config: TrainConfig,
        dataset: &Dataset,
        learners: Vec<Box<dyn Learner>>,
        rngs: Vec<SimRng>,
        step: u64,
    ) -> Result<Self> {
        let m = dataset.manifest();
        let env_id: EnvId = m.env_id.parse()?;
        let env = env_id.config()?;
        if env.obs_dim() != m.obs_dim || env.n_agents != m.n_agents {
            return Err(Error::Dimension(format!(
                "dataset dims ({} agents, obs {}) do not match {}",
                m.n_agents, m.obs_dim, m.env_id
            )));
        }
        let augmented = match &config.thresholds {
            Some(t) => dataset.augment(&t.resolve(dataset, config.return_kind)?, config.return_kind),
            None => dataset.clone(),
        };
        for (j, l) in learners.iter().enumerate() {
            let c = l.counters();
            if c.critic != step || c.actor != step || c.target != step {
                return Err(Error::schema(format!(
                    "agent {j} update counters {c:?} disagree with step {step}"
                )));
            }
        }
        let n = learners.len();
        Ok(Trainer {
            last: (0..n).map(|_| MetricsRecord::empty(step)).collect(),
            index: TransitionIndex::new(augmented)?,
            config,
            env_id,
            learners,
            rngs,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learners(&self) -> &[Box<dyn Learner>] {
        &self.learners
    }

    pub fn index(&self) -> &TransitionIndex {
        &self.index
    }

    pub fn policy(&self) -> LearnerPolicy<'_> {
        LearnerPolicy {
            learners: &self.learners,
            obs_dim: self.index.dataset().manifest().obs_dim,
        }
    }

    /// One training step over all agents.
    pub fn step(&mut self) -> Result<()> {
        let size = self.config.batch_size;
        let next = self.step + 1;
        for (j, (learner, rng)) in self.learners.iter_mut().zip(&mut self.rngs).enumerate() {
            let batch = self.index.sample(j, size, rng)?;
            let critic = learner.critic_step(&batch, rng)?;
            let actor = learner.actor_step(&batch, rng)?;
            learner.target_step()?;
            let c = learner.counters();
            assert!(
                c.critic == next && c.actor == next && c.target == next,
                "agent {j}: update counters {c:?} out of order at step {next}"
            );
            self.last[j] = MetricsRecord {
                agent: Some(j),
                bc_loss: actor.bc_loss,
                q_loss: actor.q_loss,
                critic_loss: Some(critic.loss),
                mean_q_data: Some(critic.q_data),
                mean_q_random: Some(critic.q_random),
                ..MetricsRecord::empty(next)
            };
        }
        self.step = next;
        Ok(())
    }

    /// Greedy evaluation over `episodes` episodes on the evaluation environment.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<Vec<f64>> {
        let env = match &self.config.eval_env {
            Some(id) => id.parse::<EnvId>()?,
            None => self.env_id.clone(),
        };
        rollout(&self.policy(), &env.config()?, episodes, seed, true)
    }

    /// Trains until `total_steps`, passing each metrics record to `sink` and
    /// calling `on_step` after every step (for periodic checkpoints).
    pub fn run(
        &mut self,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
        on_step: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.total_steps {
            self.step()?;
            if self.step.is_multiple_of(self.config.metrics_every) {
                for r in &self.last {
                    sink(r)?;
                }
            }
            if self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every) {
                let returns = self.evaluate(self.config.eval_episodes, eval_seed(self.config.seed, self.step))?;
                let n = returns.len().max(1) as f64;
                let mean = returns.iter().sum::<f64>() / n;
                let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
                sink(&MetricsRecord {
                    eval_return_mean: Some(mean),
                    eval_return_std: Some(std),
                    ..MetricsRecord::empty(self.step)
                })?;
            }
            on_step(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let m = self.index.dataset().manifest();
        let header = CheckpointHeader {
            config: self.config.clone(),
            schedule: self.config.schedule()?.descriptor(),
            env_id: m.env_id.clone(),
            n_agents: m.n_agents,
            obs_dim: m.obs_dim,
            act_dim: m.act_dim,
            step: self.step,
            rngs: self.rngs.clone(),
            agents: Vec::new(),
        };
        Ok(Checkpoint::new(
            header,
            self.learners.iter().map(|l| l.export()).collect(),
        ))
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIVERGED_FILE: &str = "diverged.bin";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Keeps the records at or before `step`, dropping any written after the
/// checkpoint a run resumes from.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::open(path).map_err(io)?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io)?;
        let rec: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io)
}

/// Trains on the dataset at `data`, writing the metrics stream, the config
/// and the final checkpoint into `out_dir`. With `resume`, continues from
/// that checkpoint and appends to the existing metrics stream. A diverging
/// run leaves a diagnostic checkpoint behind and returns the error.
pub fn run_training(config: TrainConfig, data: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let dataset = Dataset::load(data)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let t = Trainer::resume(&ckpt, Some(config), &dataset)?;
            if metrics_path.exists() {
                truncate_metrics(&metrics_path, t.step_count())?;
            }
            t
        }
        None => {
            let t = Trainer::new(config, &dataset)?;
            File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            t
        }
    };
    let config_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, trainer.config().to_json() + "\n").map_err(|e| Error::io(&config_path, e))?;

    let file = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let every = trainer.config().checkpoint_every;
    let result = trainer.run(
        &mut |r| {
            let line = serde_json::to_string(r)?;
            writeln!(writer, "{line}").map_err(|e| Error::io(&metrics_path, e))
        },
        &mut |t| {
            if every > 0 && t.step_count() % every == 0 {
                t.checkpoint()?.save(&ckpt_path)?;
            }
            Ok(())
        },
    );
    writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if let Err(e) = result {
        if matches!(e, Error::Numerical(_)) {
            trainer.checkpoint()?.save(&out_dir.join(DIVERGED_FILE))?;
        }
        return Err(e);
    }
    trainer.checkpoint()?.save(&ckpt_path)?;
    Ok(TrainOutcome {
        steps: trainer.step_count(),
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}
