use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::approximators::{soft_update, Adam, DeterministicActor, Mode, Norm, ParamSet, QNetwork, ScoreNetwork};
use crate::critic::{CriticDiagnostics, CriticPair, Transitions};
use crate::diffusion_policy::{policy_loss, sample_action, Guidance, GuidanceCritics, QNormMode};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tape::{Graph, Matrix};
use crate::SimRng;

/// Diagnostics of one actor update. Terms an algorithm does not have are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorDiagnostics {
    pub bc_loss: Option<f64>,
    pub q_loss: Option<f64>,
}

/// Number of completed critic, actor and target updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub critic: u64,
    pub actor: u64,
    pub target: u64,
}

/// Everything needed to rebuild a learner bit-for-bit: named flat tensors
/// in a fixed order and integer counters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentState {
    pub tensors: Vec<(String, Vec<f64>)>,
    pub counters: BTreeMap<String, u64>,
}

impl AgentState {
    fn push(&mut self, name: &str, data: &[f64]) {
        self.tensors.push((name.to_string(), data.to_vec()));
    }

    fn tensor(&self, name: &str, len: usize) -> Result<&[f64]> {
        let (_, data) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::schema(format!("agent state lacks tensor `{name}`")))?;
        if data.len() != len {
            return Err(Error::Dimension(format!(
                "tensor `{name}` holds {} values, configuration implies {len}",
                data.len()
            )));
        }
        Ok(data)
    }

    fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .get(name)
            .copied()
            .ok_or_else(|| Error::schema(format!("agent state lacks counter `{name}`")))
    }

    fn push_adam(&mut self, name: &str, opt: &Adam) {
        self.push(&format!("{name}.m"), &opt.m);
        self.push(&format!("{name}.v"), &opt.v);
        self.counters.insert(format!("{name}.step"), opt.step);
    }

    fn load_adam(&self, name: &str, opt: &mut Adam) -> Result<()> {
        let n = opt.m.len();
        opt.m = self.tensor(&format!("{name}.m"), n)?.to_vec();
        opt.v = self.tensor(&format!("{name}.v"), n)?.to_vec();
        opt.step = self.counter(&format!("{name}.step"))?;
        Ok(())
    }

    fn load_params(&self, name: &str, params: &mut ParamSet) -> Result<()> {
        let data = self.tensor(name, params.len())?;
        params.as_mut_slice().copy_from_slice(data);
        Ok(())
    }

    fn push_counters(&mut self, c: UpdateCounters) {
        self.counters.insert("updates.critic".into(), c.critic);
        self.counters.insert("updates.actor".into(), c.actor);
        self.counters.insert("updates.target".into(), c.target);
    }

    fn load_counters(&self) -> Result<UpdateCounters> {
        Ok(UpdateCounters {
            critic: self.counter("updates.critic")?,
            actor: self.counter("updates.actor")?,
            target: self.counter("updates.target")?,
        })
    }
}

/// One agent's decentralized learner.
pub trait Learner: Send {
    fn algo(&self) -> &'static str;
    fn critic_step(&mut self, batch: &Transitions, rng: &mut SimRng) -> Result<CriticDiagnostics>;
    fn actor_step(&mut self, batch: &Transitions, rng: &mut SimRng) -> Result<ActorDiagnostics>;
    fn target_step(&mut self) -> Result<()>;
    /// Actions for a batch of this agent's observations. `greedy` turns
    /// dropout off; a diffusion policy still samples its terminal noise.
    fn act(&self, obs: &Matrix, greedy: bool, rng: &mut SimRng) -> Result<Matrix>;
    fn counters(&self) -> UpdateCounters;
    fn export(&self) -> AgentState;
}

/// Dimensions and hyperparameters a learner is built from.
#[derive(Debug, Clone, Copy)]
pub struct LearnerSpec<'a> {
    pub config: &'a TrainConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
}

pub struct LearnerEntry {
    pub name: &'static str,
    pub create: fn(&LearnerSpec<'_>, &mut SimRng) -> Result<Box<dyn Learner>>,
    pub restore: fn(&LearnerSpec<'_>, &AgentState) -> Result<Box<dyn Learner>>,
}

static LEARNERS: [LearnerEntry; 3] = [
    LearnerEntry {
        name: "dom2",
        create: |s, rng| Ok(Box::new(DiffusionLearner::new(s, "dom2", rng)?)),
        restore: |s, st| Ok(Box::new(DiffusionLearner::restore(s, "dom2", st)?)),
    },
    LearnerEntry {
        name: "diff_bc",
        create: |s, rng| Ok(Box::new(DiffusionLearner::new(s, "diff_bc", rng)?)),
        restore: |s, st| Ok(Box::new(DiffusionLearner::restore(s, "diff_bc", st)?)),
    },
    LearnerEntry {
        name: "ma_cql",
        create: |s, rng| Ok(Box::new(CqlLearner::new(s, rng)?)),
        restore: |s, st| Ok(Box::new(CqlLearner::restore(s, st)?)),
    },
];

pub fn learner_names() -> Vec<&'static str> {
    LEARNERS.iter().map(|e| e.name).collect()
}

pub fn learner_entry(name: &str) -> Result<&'static LearnerEntry> {
    LEARNERS.iter().find(|e| e.name == name).ok_or_else(|| Error::Lookup {
        kind: "algorithm",
        name: name.to_string(),
    })
}

fn check_finite(what: &str, grad: &[f64]) -> Result<()> {
    if grad.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} gradient is not finite")))
    }
}

fn export_critics(state: &mut AgentState, critics: &CriticPair, opts: &[Adam; 2]) {
    for (k, (online, target)) in critics.online.iter().zip(&critics.target).enumerate() {
        for (tag, net) in [("critic", online), ("critic_target", target)] {
            state.push(&format!("{tag}{k}"), net.params().as_slice());
            state.push(
                &format!("{tag}{k}.running_mean"),
                net.running_mean().as_slice().expect("contiguous"),
            );
            state.push(
                &format!("{tag}{k}.running_var"),
                net.running_var().as_slice().expect("contiguous"),
            );
        }
        state.push_adam(&format!("critic{k}.adam"), &opts[k]);
    }
}

fn restore_critics(spec: &LearnerSpec<'_>, state: &AgentState) -> Result<(CriticPair, [Adam; 2])> {
    let qc = spec.config.q_config(spec.obs_dim, spec.act_dim);
    let mut template = CriticPair::new(qc, spec.config.critic_config(), &mut SimRng::seed_from_u64(0))?;
    let input = spec.obs_dim + spec.act_dim;
    let mut opts = [
        Adam::new(template.online[0].params().len(), spec.config.lr_critic),
        Adam::new(template.online[1].params().len(), spec.config.lr_critic),
    ];
    for (k, opt) in opts.iter_mut().enumerate() {
        for tag in ["critic", "critic_target"] {
            let net = if tag == "critic" {
                &template.online[k]
            } else {
                &template.target[k]
            };
            let mut params = net.params().clone();
            state.load_params(&format!("{tag}{k}"), &mut params)?;
            let mean = state.tensor(&format!("{tag}{k}.running_mean"), input)?.to_vec();
            let var = state.tensor(&format!("{tag}{k}.running_var"), input)?.to_vec();
            let rebuilt = QNetwork::from_parts(qc, params, mean, var)?;
            if tag == "critic" {
                template.online[k] = rebuilt;
            } else {
                template.target[k] = rebuilt;
            }
        }
        state.load_adam(&format!("critic{k}.adam"), opt)?;
    }
    Ok((template, opts))
}

/// Diffusion policy with conservative twin critics. As `dom2` it follows the
/// combined score-matching plus Q-guidance objective; as `diff_bc` the
/// guidance weight is zero and the actor objective is score matching alone.
pub struct DiffusionLearner {
    algo: &'static str,
    eta: f64,
    norm_mode: QNormMode,
    guidance: Guidance,
    rho: f64,
    schedule: NoiseSchedule,
    score: ScoreNetwork,
    score_target: ScoreNetwork,
    critics: CriticPair,
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    counters: UpdateCounters,
}

impl DiffusionLearner {
    fn new(spec: &LearnerSpec<'_>, algo: &'static str, rng: &mut SimRng) -> Result<Self> {
        let c = spec.config;
        let score = ScoreNetwork::new(c.score_config(spec.obs_dim, spec.act_dim), rng)?;
        let critics = CriticPair::new(c.q_config(spec.obs_dim, spec.act_dim), c.critic_config(), rng)?;
        let critic_opts = [
            Adam::new(critics.online[0].params().len(), c.lr_critic),
            Adam::new(critics.online[1].params().len(), c.lr_critic),
        ];
        Ok(DiffusionLearner {
            algo,
            eta: if algo == "dom2" { c.effective_eta() } else { 0.0 },
            norm_mode: c.q_norm_mode,
            guidance: c.guidance,
            rho: c.rho,
            schedule: c.schedule()?,
            actor_opt: Adam::new(score.params().len(), c.lr_actor),
            score_target: score.clone(),
            score,
            critics,
            critic_opts,
            counters: UpdateCounters::default(),
        })
    }

    fn restore(spec: &LearnerSpec<'_>, algo: &'static str, state: &AgentState) -> Result<Self> {
        let mut out = DiffusionLearner::new(spec, algo, &mut SimRng::seed_from_u64(0))?;
        state.load_params("score", out.score.params_mut())?;
        state.load_params("score_target", out.score_target.params_mut())?;
        state.load_adam("score.adam", &mut out.actor_opt)?;
        (out.critics, out.critic_opts) = restore_critics(spec, state)?;
        out.counters = state.load_counters()?;
        Ok(out)
    }

    pub fn score(&self) -> &ScoreNetwork {
        &self.score
    }

    pub fn critics(&self) -> &CriticPair {
        &self.critics
    }
}

impl Learner for DiffusionLearner {
    fn algo(&self) -> &'static str {
        self.algo
    }

    /// Next actions for the TD target come from the target score network.
    fn critic_step(&mut self, batch: &Transitions, rng: &mut SimRng) -> Result<CriticDiagnostics> {
        let next = sample_action(&self.score_target, &batch.next_obs, &self.schedule, rng)?;
        let diag = self.critics.update(batch, &next.action, &mut self.critic_opts, rng)?;
        self.counters.critic += 1;
        Ok(diag)
    }

    fn actor_step(&mut self, batch: &Transitions, rng: &mut SimRng) -> Result<ActorDiagnostics> {
        let mut dropout_rng = SimRng::seed_from_u64(rng.random());
        let mut g = Graph::new();
        let p = self.score.params().bind(&mut g, true);
        let critics = GuidanceCritics {
            first: &self.critics.online[0],
            second: &self.critics.online[1],
            guidance: self.guidance,
        };
        let loss = policy_loss(
            &mut g,
            &self.score,
            &p,
            critics,
            &batch.obs,
            &batch.act,
            &self.schedule,
            self.eta,
            self.norm_mode,
            rng,
            Mode::Train(&mut dropout_rng),
        )?;
        let total = g.scalar(loss.total);
        if !total.is_finite() {
            return Err(Error::Numerical(format!("actor loss diverged: {total}")));
        }
        let grads = g.backward(loss.total);
        let flat = self.score.params().flat_grad(&grads, &p);
        check_finite("actor", &flat)?;
        self.actor_opt.apply(self.score.params_mut().as_mut_slice(), &flat)?;
        self.counters.actor += 1;
        Ok(ActorDiagnostics {
            bc_loss: Some(g.scalar(loss.bc)),
            q_loss: (self.eta != 0.0).then(|| g.scalar(loss.q.loss)),
        })
    }

    fn target_step(&mut self) -> Result<()> {
        soft_update(
            self.score_target.params_mut().as_mut_slice(),
            self.score.params().as_slice(),
            self.rho,
        )?;
        self.critics.update_targets(self.rho)?;
        self.counters.target += 1;
        Ok(())
    }

    fn act(&self, obs: &Matrix, _greedy: bool, rng: &mut SimRng) -> Result<Matrix> {
        Ok(sample_action(&self.score, obs, &self.schedule, rng)?.action)
    }

    fn counters(&self) -> UpdateCounters {
        self.counters
    }

    fn export(&self) -> AgentState {
        let mut s = AgentState::default();
        s.push("score", self.score.params().as_slice());
        s.push("score_target", self.score_target.params().as_slice());
        s.push_adam("score.adam", &self.actor_opt);
        export_critics(&mut s, &self.critics, &self.critic_opts);
        s.push_counters(self.counters);
        s
    }
}

/// Conservative Q-learning baseline with a deterministic actor that
/// maximizes the first critic.
pub struct CqlLearner {
    rho: f64,
    actor: DeterministicActor,
    actor_target: DeterministicActor,
    critics: CriticPair,
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    counters: UpdateCounters,
}

impl CqlLearner {
    fn new(spec: &LearnerSpec<'_>, rng: &mut SimRng) -> Result<Self> {
        let c = spec.config;
        let actor = DeterministicActor::new(c.actor_config(spec.obs_dim, spec.act_dim), rng)?;
        let critics = CriticPair::new(c.q_config(spec.obs_dim, spec.act_dim), c.critic_config(), rng)?;
        let critic_opts = [
            Adam::new(critics.online[0].params().len(), c.lr_critic),
            Adam::new(critics.online[1].params().len(), c.lr_critic),
        ];
        Ok(CqlLearner {
            rho: c.rho,
            actor_opt: Adam::new(actor.params().len(), c.lr_actor),
            actor_target: actor.clone(),
            actor,
            critics,
            critic_opts,
            counters: UpdateCounters::default(),
        })
    }

    fn restore(spec: &LearnerSpec<'_>, state: &AgentState) -> Result<Self> {
        let mut out = CqlLearner::new(spec, &mut SimRng::seed_from_u64(0))?;
        state.load_params("actor", out.actor.params_mut())?;
        state.load_params("actor_target", out.actor_target.params_mut())?;
        state.load_adam("actor.adam", &mut out.actor_opt)?;
        (out.critics, out.critic_opts) = restore_critics(spec, state)?;
        out.counters = state.load_counters()?;
        Ok(out)
    }
}

impl Learner for CqlLearner {
    fn algo(&self) -> &'static str {
        "ma_cql"
    }

    fn critic_step(&mut self, batch: &Transitions, rng: &mut SimRng) -> Result<CriticDiagnostics> {
        let next = self.actor_target.predict(&batch.next_obs)?;
        let diag = self.critics.update(batch, &next, &mut self.critic_opts, rng)?;
        self.counters.critic += 1;
        Ok(diag)
    }

    fn actor_step(&mut self, batch: &Transitions, _rng: &mut SimRng) -> Result<ActorDiagnostics> {
        let mut g = Graph::new();
        let p = self.actor.params().bind(&mut g, true);
        let obs = g.constant(batch.obs.clone());
        let act = self.actor.forward(&mut g, &p, obs)?;
        let q_net = &self.critics.online[0];
        let qp = q_net.params().bind(&mut g, false);
        let (q, _) = q_net.forward(&mut g, &qp, obs, act, Norm::Running)?;
        let mean_q = g.mean(q);
        let loss = g.scale(mean_q, -1.0);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("actor loss diverged: {value}")));
        }
        let grads = g.backward(loss);
        let flat = self.actor.params().flat_grad(&grads, &p);
        check_finite("actor", &flat)?;
        self.actor_opt.apply(self.actor.params_mut().as_mut_slice(), &flat)?;
        self.counters.actor += 1;
        Ok(ActorDiagnostics {
            bc_loss: None,
            q_loss: Some(value),
        })
    }

    fn target_step(&mut self) -> Result<()> {
        soft_update(
            self.actor_target.params_mut().as_mut_slice(),
            self.actor.params().as_slice(),
            self.rho,
        )?;
        self.critics.update_targets(self.rho)?;
        self.counters.target += 1;
        Ok(())
    }

    fn act(&self, obs: &Matrix, _greedy: bool, _rng: &mut SimRng) -> Result<Matrix> {
        self.actor.predict(obs)
    }

    fn counters(&self) -> UpdateCounters {
        self.counters
    }

    fn export(&self) -> AgentState {
        let mut s = AgentState::default();
        s.push("actor", self.actor.params().as_slice());
        s.push("actor_target", self.actor_target.params().as_slice());
        s.push_adam("actor.adam", &self.actor_opt);
        export_critics(&mut s, &self.critics, &self.critic_opts);
        s.push_counters(self.counters);
        s
    }
}
