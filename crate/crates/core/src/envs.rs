//! Particle-world cooperative navigation: `n` agents, `m` landmarks on the unit
//! circle, optional evaluation shifts, and scripted behavior policies.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Matrix;
use crate::SimRng;

/// Relative position reported for a hidden landmark.
pub const HIDDEN_LANDMARK: [f64; 2] = [10.0, 10.0];
/// Version tag of the observation layout, recorded in dataset manifests.
pub const OBS_ENCODING: &str = "vel2-pos2-landmarks2m-sentinel10-others2n-v1";
pub const ACT_DIM: usize = 2;
/// Default lower speed bound of the speed shift for cooperative navigation.
pub const DEFAULT_V_MIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Shift {
    None,
    /// Each reset draws every agent's max speed uniformly from `[v_min, 1]`.
    Speed(f64),
    /// Each reset hides this many landmarks chosen uniformly at random.
    Dismiss(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub landmarks: Vec<[f64; 2]>,
    pub agent_size: f64,
    pub landmark_size: f64,
    pub episode_length: usize,
    pub dt: f64,
    pub damping: f64,
    pub accel: f64,
    pub max_speed: Vec<f64>,
    pub shift: Shift,
    pub occupy_bonus: f64,
    pub collision_penalty: f64,
}

/// `m` landmarks evenly spaced on the unit circle, the first at `(1, 0)`.
pub fn circle_landmarks(m: usize) -> Vec<[f64; 2]> {
    (0..m)
        .map(|j| {
            let t = 2.0 * PI * j as f64 / m as f64;
            [t.cos(), t.sin()]
        })
        .collect()
}

impl EnvConfig {
    pub fn coop_nav(n_agents: usize, n_landmarks: usize) -> Self {
        EnvConfig {
            n_agents,
            landmarks: circle_landmarks(n_landmarks),
            agent_size: 0.1,
            landmark_size: 0.1,
            episode_length: 25,
            dt: 0.1,
            damping: 0.25,
            accel: 5.0,
            max_speed: vec![1.0; n_agents],
            shift: Shift::None,
            occupy_bonus: 5.0,
            collision_penalty: 1.0,
        }
    }

    pub fn with_shift(mut self, shift: Shift) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_agents == 0 {
            return bad("at least one agent required".into());
        }
        if self.landmarks.is_empty() {
            return bad("at least one landmark required".into());
        }
        if !(self.agent_size > 0.0 && self.landmark_size > 0.0) {
            return bad("agent and landmark sizes must be positive".into());
        }
        let positive = |v: f64| v > 0.0;
        if !positive(self.dt) || !(0.0..1.0).contains(&self.damping) || !positive(self.accel) {
            return bad(format!(
                "invalid physics: dt={} damping={} accel={}",
                self.dt, self.damping, self.accel
            ));
        }
        if self.episode_length == 0 {
            return bad("episode length must be positive".into());
        }
        if self.max_speed.len() != self.n_agents || !self.max_speed.iter().all(|&s| s > 0.0) {
            return bad("one positive max speed per agent required".into());
        }
        if self.landmarks.iter().flatten().any(|v| !v.is_finite()) {
            return bad("landmark positions must be finite".into());
        }
        match self.shift {
            Shift::Speed(v) if !(v > 0.0 && v <= 1.0) => bad(format!("speed shift v_min={v} outside (0, 1]")),
            Shift::Dismiss(k) if k >= self.landmarks.len() => {
                bad(format!("cannot hide {k} of {} landmarks", self.landmarks.len()))
            }
            _ => Ok(()),
        }
    }

    pub fn obs_dim(&self) -> usize {
        4 + 2 * self.landmarks.len() + 2 * (self.n_agents - 1)
    }
}

/// Parsed environment id: a base task plus an optional shift suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvId {
    pub base: String,
    pub shift: Shift,
}

const TASKS: [(&str, usize, usize); 2] = [("coop_nav_3a3l", 3, 3), ("coop_nav_3a6l", 3, 6)];

impl EnvId {
    pub fn config(&self) -> Result<EnvConfig> {
        let (_, n, m) = TASKS
            .iter()
            .find(|(name, _, _)| *name == self.base)
            .ok_or_else(|| Error::Lookup {
                kind: "environment",
                name: self.base.clone(),
            })?;
        let cfg = EnvConfig::coop_nav(*n, *m).with_shift(self.shift);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_shift(&self, shift: Shift) -> EnvId {
        EnvId {
            base: self.base.clone(),
            shift,
        }
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, suffix) = match s.split_once('@') {
            Some((b, rest)) => (b, Some(rest)),
            None => (s, None),
        };
        if !TASKS.iter().any(|(name, _, _)| *name == base) {
            return Err(Error::Lookup {
                kind: "environment",
                name: base.to_string(),
            });
        }
        let shift = match suffix {
            None => Shift::None,
            Some(rest) => {
                let (key, value) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("malformed shift suffix '@{rest}'")))?;
                let parse_err = || Error::config(format!("malformed shift value '{value}'"));
                match key {
                    "speed" => Shift::Speed(value.parse().map_err(|_| parse_err())?),
                    "dismiss" => Shift::Dismiss(value.parse().map_err(|_| parse_err())?),
                    _ => return Err(Error::config(format!("unknown shift '{key}'"))),
                }
            }
        };
        let id = EnvId {
            base: base.to_string(),
            shift,
        };
        id.config()?;
        Ok(id)
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.shift {
            Shift::None => write!(f, "{}", self.base),
            Shift::Speed(v) => write!(f, "{}@speed={v}", self.base),
            Shift::Dismiss(k) => write!(f, "{}@dismiss={k}", self.base),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub active: Vec<bool>,
    pub max_speed: Vec<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Ordered agent pairs closer than two agent radii, counted once per pair.
    pub collisions: usize,
    /// Distance from each agent to its nearest active landmark.
    pub min_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionResult {
    /// One observation row per agent.
    pub obs: Matrix,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

/// A single cooperative-navigation episode runner.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    state: EnvState,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_agents;
        let state = EnvState {
            positions: vec![[0.0; 2]; n],
            velocities: vec![[0.0; 2]; n],
            active: vec![true; config.landmarks.len()],
            max_speed: config.max_speed.clone(),
            step: 0,
        };
        Ok(Env { config, state })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    /// Starts an episode; the outcome depends only on the config and `seed`.
    pub fn reset(&mut self, seed: u64) -> Matrix {
        let mut rng = SimRng::seed_from_u64(seed);
        let m = self.config.landmarks.len();
        self.state.active = vec![true; m];
        self.state.max_speed = self.config.max_speed.clone();
        match self.config.shift {
            Shift::None => {}
            Shift::Dismiss(k) => {
                for j in sample(&mut rng, m, k) {
                    self.state.active[j] = false;
                }
            }
            Shift::Speed(v_min) => {
                for s in self.state.max_speed.iter_mut() {
                    *s = rng.random_range(v_min..=1.0);
                }
            }
        }
        for p in self.state.positions.iter_mut() {
            let r = 0.1 * rng.random::<f64>().sqrt();
            let t = 2.0 * PI * rng.random::<f64>();
            *p = [r * t.cos(), r * t.sin()];
        }
        self.state.velocities.iter_mut().for_each(|v| *v = [0.0; 2]);
        self.state.step = 0;
        self.observations()
    }

    /// Overwrites the physical state, e.g. to set up a test scenario.
    pub fn set_state(&mut self, state: EnvState) -> Result<()> {
        let n = self.config.n_agents;
        if state.positions.len() != n
            || state.velocities.len() != n
            || state.max_speed.len() != n
            || state.active.len() != self.config.landmarks.len()
            || state.step > self.config.episode_length
        {
            return Err(Error::contract("state does not match environment configuration"));
        }
        self.state = state;
        Ok(())
    }

    pub fn observations(&self) -> Matrix {
        let n = self.config.n_agents;
        let mut obs = Matrix::zeros((n, self.obs_dim()));
        for j in 0..n {
            let p = self.state.positions[j];
            let v = self.state.velocities[j];
            let mut row = Vec::with_capacity(self.obs_dim());
            row.extend_from_slice(&v);
            row.extend_from_slice(&p);
            for (l, lm) in self.config.landmarks.iter().enumerate() {
                if self.state.active[l] {
                    row.extend_from_slice(&[lm[0] - p[0], lm[1] - p[1]]);
                } else {
                    row.extend_from_slice(&HIDDEN_LANDMARK);
                }
            }
            for (k, q) in self.state.positions.iter().enumerate() {
                if k != j {
                    row.extend_from_slice(&[q[0] - p[0], q[1] - p[1]]);
                }
            }
            obs.row_mut(j).assign(&ndarray::Array1::from(row));
        }
        obs
    }

    /// Advances one step with one action row per agent (clamped to `[-1, 1]`).
    pub fn step(&mut self, actions: &Matrix) -> Result<TransitionResult> {
        let c = &self.config;
        let n = c.n_agents;
        if self.state.step >= c.episode_length {
            return Err(Error::contract("episode already finished; call reset"));
        }
        if actions.dim() != (n, ACT_DIM) || actions.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "expected finite actions of shape ({n}, {ACT_DIM}), got {:?}",
                actions.dim()
            )));
        }
        for j in 0..n {
            let v = &mut self.state.velocities[j];
            for d in 0..ACT_DIM {
                let a = actions[[j, d]].clamp(-1.0, 1.0);
                v[d] = (1.0 - c.damping) * v[d] + a * c.accel * c.dt;
            }
            let speed = v[0].hypot(v[1]);
            let cap = self.state.max_speed[j];
            if speed > cap {
                v[0] *= cap / speed;
                v[1] *= cap / speed;
            }
            let p = &mut self.state.positions[j];
            p[0] += v[0] * c.dt;
            p[1] += v[1] * c.dt;
        }
        self.state.step += 1;

        let reach = c.agent_size + c.landmark_size;
        let contact = 2.0 * c.agent_size;
        let mut rewards = Vec::with_capacity(n);
        let mut min_distances = Vec::with_capacity(n);
        let mut collisions = 0;
        for j in 0..n {
            let p = self.state.positions[j];
            let d = c
                .landmarks
                .iter()
                .zip(&self.state.active)
                .filter(|(_, &on)| on)
                .map(|(lm, _)| dist(p, *lm))
                .fold(f64::INFINITY, f64::min);
            let hits = (0..n)
                .filter(|&k| k != j && dist(p, self.state.positions[k]) < contact)
                .count();
            collisions += (j + 1..n)
                .filter(|&k| dist(p, self.state.positions[k]) < contact)
                .count();
            let bonus = if d < reach { c.occupy_bonus } else { 0.0 };
            rewards.push(-d + bonus - c.collision_penalty * hits as f64);
            min_distances.push(d);
        }
        Ok(TransitionResult {
            obs: self.observations(),
            rewards,
            done: self.state.step == c.episode_length,
            info: StepInfo {
                collisions,
                min_distances,
            },
        })
    }
}

/// A behavior policy mapping per-agent observation rows to action rows.
pub trait ScriptedPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn actions(&self, obs: &Matrix, rng: &mut SimRng) -> Matrix;
}

/// Geometry the scripts need to decode observations.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n_agents: usize,
    n_landmarks: usize,
}

impl Layout {
    fn of(config: &EnvConfig) -> Self {
        Layout {
            n_agents: config.n_agents,
            n_landmarks: config.landmarks.len(),
        }
    }
}

pub const EXPERT_KP: f64 = 2.0;
pub const EXPERT_KD: f64 = 0.6;
pub const MEDIUM_NOISE: f64 = 0.5;

/// Greedy unique assignment from agent `me`'s viewpoint: repeatedly pair the
/// closest unassigned (agent, landmark), ties broken by agent then landmark index.
/// Returns the landmark (relative to `me`) assigned to `me`, if any.
fn assigned_target(row: ndarray::ArrayView1<f64>, me: usize, layout: Layout) -> Option<[f64; 2]> {
    let m = layout.n_landmarks;
    let n = layout.n_agents;
    let lm: Vec<Option<[f64; 2]>> = (0..m)
        .map(|l| {
            let rel = [row[4 + 2 * l], row[5 + 2 * l]];
            (rel != HIDDEN_LANDMARK).then_some(rel)
        })
        .collect();
    // Agent offsets relative to `me`, in agent-index order.
    let base = 4 + 2 * m;
    let mut agents = Vec::with_capacity(n);
    let mut other = 0;
    for k in 0..n {
        if k == me {
            agents.push([0.0, 0.0]);
        } else {
            agents.push([row[base + 2 * other], row[base + 2 * other + 1]]);
            other += 1;
        }
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * m);
    for (k, a) in agents.iter().enumerate() {
        for (l, t) in lm.iter().enumerate() {
            if let Some(t) = t {
                pairs.push((dist(*a, *t), k, l));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut agent_done = vec![false; n];
    let mut lm_done = vec![false; m];
    for (_, k, l) in pairs {
        if agent_done[k] || lm_done[l] {
            continue;
        }
        if k == me {
            return lm[l];
        }
        agent_done[k] = true;
        lm_done[l] = true;
    }
    None
}

fn expert_actions(obs: &Matrix, layout: Layout) -> Matrix {
    let mut out = Matrix::zeros((obs.nrows(), ACT_DIM));
    for (j, row) in obs.outer_iter().enumerate() {
        let Some(target) = assigned_target(row, j, layout) else {
            continue;
        };
        for d in 0..ACT_DIM {
            out[[j, d]] = (EXPERT_KP * target[d] - EXPERT_KD * row[d]).clamp(-1.0, 1.0);
        }
    }
    out
}

/// Proportional-derivative controller toward the greedily assigned landmark.
pub struct Expert {
    layout: Layout,
}

impl ScriptedPolicy for Expert {
    fn name(&self) -> &'static str {
        "expert"
    }

    fn actions(&self, obs: &Matrix, _: &mut SimRng) -> Matrix {
        expert_actions(obs, self.layout)
    }
}

/// Expert action plus Gaussian noise, clamped.
pub struct Medium {
    layout: Layout,
}

impl ScriptedPolicy for Medium {
    fn name(&self) -> &'static str {
        "medium"
    }

    fn actions(&self, obs: &Matrix, rng: &mut SimRng) -> Matrix {
        let mut a = expert_actions(obs, self.layout);
        a.mapv_inplace(|v| (v + MEDIUM_NOISE * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0));
        a
    }
}

/// Uniform actions on `[-1, 1]^2`.
pub struct Random;

impl ScriptedPolicy for Random {
    fn name(&self) -> &'static str {
        "random"
    }

    fn actions(&self, obs: &Matrix, rng: &mut SimRng) -> Matrix {
        Matrix::from_shape_simple_fn((obs.nrows(), ACT_DIM), || rng.random_range(-1.0..=1.0))
    }
}

type PolicyFactory = fn(&EnvConfig) -> Box<dyn ScriptedPolicy>;

const SCRIPTED: [(&str, PolicyFactory); 3] = [
    ("expert", |c| Box::new(Expert { layout: Layout::of(c) })),
    ("medium", |c| Box::new(Medium { layout: Layout::of(c) })),
    ("random", |_| Box::new(Random)),
];

pub fn scripted_policy_names() -> Vec<&'static str> {
    SCRIPTED.iter().map(|(n, _)| *n).collect()
}

/// Looks up a scripted policy by name.
pub fn scripted_policy(kind: &str, config: &EnvConfig) -> Result<Box<dyn ScriptedPolicy>> {
    SCRIPTED
        .iter()
        .find(|(n, _)| *n == kind)
        .map(|(_, make)| make(config))
        .ok_or_else(|| Error::Lookup {
            kind: "scripted policy",
            name: kind.to_string(),
        })
}

/// Runs one episode with a scripted policy and returns the per-agent returns.
pub fn scripted_episode(env: &mut Env, policy: &dyn ScriptedPolicy, seed: u64, rng: &mut SimRng) -> Result<Vec<f64>> {
    let mut obs = env.reset(seed);
    let mut returns = vec![0.0; env.n_agents()];
    loop {
        let a = policy.actions(&obs, rng);
        let t = env.step(&a)?;
        for (r, x) in returns.iter_mut().zip(&t.rewards) {
            *r += x;
        }
        obs = t.obs;
        if t.done {
            return Ok(returns);
        }
    }
}
