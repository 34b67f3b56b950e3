//! Offline trajectory datasets: generation from scripted behavior policies,
//! JSON Lines storage, return-threshold augmentation and minibatch sampling.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::Transitions;
use crate::envs::{scripted_policy, Env, EnvId, ACT_DIM, OBS_ENCODING};
use crate::error::{Error, Result};
use crate::tape::Matrix;
use crate::SimRng;

pub const FORMAT_VERSION: u32 = 1;
const RETURN_TOLERANCE: f64 = 1e-9;

/// Behavior-policy quality tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quality {
    MediumReplay,
    Medium,
    MediumExpert,
    Expert,
}

impl Quality {
    pub const ALL: [Quality; 4] = [
        Quality::MediumReplay,
        Quality::Medium,
        Quality::MediumExpert,
        Quality::Expert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Quality::MediumReplay => "medium-replay",
            Quality::Medium => "medium",
            Quality::MediumExpert => "medium-expert",
            Quality::Expert => "expert",
        }
    }

    /// Noise added to the expert action in episode `k` of `total`; zero means the
    /// plain expert.
    pub fn episode_noise(self, k: usize, total: usize) -> f64 {
        match self {
            Quality::Expert => 0.0,
            Quality::Medium => crate::envs::MEDIUM_NOISE,
            Quality::MediumExpert => {
                if k.is_multiple_of(2) {
                    0.0
                } else {
                    crate::envs::MEDIUM_NOISE
                }
            }
            Quality::MediumReplay => {
                if total <= 1 {
                    1.5
                } else {
                    1.5 - k as f64 / (total - 1) as f64
                }
            }
        }
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quality::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "dataset quality",
                name: s.to_string(),
            })
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a trajectory's scalar return is formed from per-agent returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnKind {
    #[default]
    Joint,
    PerAgentMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationInfo {
    pub thresholds: Vec<f64>,
    pub return_kind: ReturnKind,
    pub source_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub env_id: String,
    pub generator: String,
    pub seed: u64,
    pub trajectories: usize,
    pub transitions: usize,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs_encoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationInfo>,
}

/// One episode. Arrays are flat: `obs[(t * n + j) * obs_dim + k]`, likewise for
/// actions; `rewards[t * n + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub env_id: String,
    pub seed: u64,
    pub steps: usize,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub returns: Vec<f64>,
}

/// Wire form of a trajectory line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    env_id: String,
    seed: u64,
    obs: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
    dones: Vec<bool>,
    returns: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    manifest: Manifest,
}

fn nest(flat: &[f64], steps: usize, n: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..steps)
        .map(|t| {
            (0..n)
                .map(|j| flat[(t * n + j) * d..(t * n + j + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

impl Trajectory {
    pub fn obs_row(&self, t: usize, agent: usize) -> &[f64] {
        let off = (t * self.n_agents + agent) * self.obs_dim;
        &self.obs[off..off + self.obs_dim]
    }

    pub fn action_row(&self, t: usize, agent: usize) -> &[f64] {
        let off = (t * self.n_agents + agent) * self.act_dim;
        &self.actions[off..off + self.act_dim]
    }

    pub fn reward(&self, t: usize, agent: usize) -> f64 {
        self.rewards[t * self.n_agents + agent]
    }

    pub fn joint_return(&self) -> f64 {
        self.returns.iter().sum()
    }

    pub fn scalar_return(&self, kind: ReturnKind) -> f64 {
        match kind {
            ReturnKind::Joint => self.joint_return(),
            ReturnKind::PerAgentMean => self.joint_return() / self.n_agents as f64,
        }
    }

    fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            env_id: self.env_id.clone(),
            seed: self.seed,
            obs: nest(&self.obs, self.steps, self.n_agents, self.obs_dim),
            actions: nest(&self.actions, self.steps, self.n_agents, self.act_dim),
            rewards: self.rewards.chunks(self.n_agents).map(<[f64]>::to_vec).collect(),
            dones: self.dones.clone(),
            returns: self.returns.clone(),
        }
    }

    fn from_record(r: TrajectoryRecord, line: usize) -> Result<Self> {
        let bad = |m: &str| Error::schema(format!("trajectory on line {line}: {m}"));
        let steps = r.obs.len();
        if steps == 0 {
            return Err(bad("empty trajectory"));
        }
        if r.actions.len() != steps || r.rewards.len() != steps || r.dones.len() != steps {
            return Err(bad("obs, actions, rewards and dones differ in length"));
        }
        let n = r.returns.len();
        let obs_dim = r.obs[0].first().map_or(0, Vec::len);
        let act_dim = r.actions[0].first().map_or(0, Vec::len);
        if n == 0 || obs_dim == 0 || act_dim == 0 {
            return Err(bad("missing agents or empty vectors"));
        }
        let mut obs = Vec::with_capacity(steps * n * obs_dim);
        let mut actions = Vec::with_capacity(steps * n * act_dim);
        let mut rewards = Vec::with_capacity(steps * n);
        for t in 0..steps {
            if r.obs[t].len() != n || r.actions[t].len() != n || r.rewards[t].len() != n {
                return Err(bad("per-step agent count differs from returns"));
            }
            for j in 0..n {
                if r.obs[t][j].len() != obs_dim || r.actions[t][j].len() != act_dim {
                    return Err(bad("ragged observation or action vectors"));
                }
                obs.extend_from_slice(&r.obs[t][j]);
                actions.extend_from_slice(&r.actions[t][j]);
            }
            rewards.extend_from_slice(&r.rewards[t]);
        }
        if obs.iter().chain(&actions).chain(&rewards).any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        if actions.iter().any(|a| a.abs() > 1.0) {
            return Err(bad("action outside [-1, 1]"));
        }
        for j in 0..n {
            let sum: f64 = (0..steps).map(|t| rewards[t * n + j]).sum();
            if (sum - r.returns[j]).abs() > RETURN_TOLERANCE * sum.abs().max(1.0) {
                return Err(bad(&format!(
                    "stored return {} of agent {j} differs from reward sum {sum}",
                    r.returns[j]
                )));
            }
        }
        Ok(Trajectory {
            env_id: r.env_id,
            seed: r.seed,
            steps,
            n_agents: n,
            obs_dim,
            act_dim,
            obs,
            actions,
            rewards,
            dones: r.dones,
            returns: r.returns,
        })
    }
}

/// An ordered multiset of trajectories. Duplicates created by augmentation are
/// index references into shared storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    manifest: Manifest,
    storage: Arc<Vec<Trajectory>>,
    members: Vec<usize>,
}

impl Dataset {
    pub fn new(manifest: Manifest, trajectories: Vec<Trajectory>) -> Result<Self> {
        let members = (0..trajectories.len()).collect();
        let ds = Dataset {
            manifest,
            storage: Arc::new(trajectories),
            members,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::schema(format!(
                "dataset format version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        for (i, t) in self.storage.iter().enumerate() {
            if t.env_id != m.env_id {
                return Err(Error::schema(format!(
                    "trajectory {i} is from '{}' but the manifest says '{}'",
                    t.env_id, m.env_id
                )));
            }
            if t.n_agents != m.n_agents || t.obs_dim != m.obs_dim || t.act_dim != m.act_dim {
                return Err(Error::schema(format!(
                    "trajectory {i} shape disagrees with the manifest"
                )));
            }
        }
        if m.trajectories != self.members.len() || m.transitions != self.transition_count() {
            return Err(Error::schema("manifest sizes disagree with the trajectories"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, i: usize) -> &Trajectory {
        &self.storage[self.members[i]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.members.iter().map(|&k| &self.storage[k])
    }

    /// Storage index behind each member, exposing shared duplicates.
    pub fn member_ids(&self) -> &[usize] {
        &self.members
    }

    pub fn transition_count(&self) -> usize {
        self.iter().map(|t| t.steps).sum()
    }

    pub fn returns(&self, kind: ReturnKind) -> Vec<f64> {
        self.iter().map(|t| t.scalar_return(kind)).collect()
    }

    /// Appends, for each threshold in order, every member whose return reaches
    /// it. Each member ends with multiplicity `1 + |{r in R : Return >= r}|`.
    pub fn augment(&self, thresholds: &[f64], kind: ReturnKind) -> Dataset {
        let returns = self.returns(kind);
        let mut members = self.members.clone();
        for &r in thresholds {
            for (i, &ret) in returns.iter().enumerate() {
                if ret >= r {
                    members.push(self.members[i]);
                }
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.trajectories = members.len();
        manifest.augmentation = Some(AugmentationInfo {
            thresholds: thresholds.to_vec(),
            return_kind: kind,
            source_trajectories: self.members.len(),
        });
        let mut out = Dataset {
            manifest,
            storage: Arc::clone(&self.storage),
            members,
        };
        out.manifest.transitions = out.transition_count();
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(path, e);
        if is_gzip(path) {
            let mut w = BufWriter::new(GzEncoder::new(file, Compression::default()));
            self.write_to(&mut w).map_err(io)?;
            w.into_inner()
                .map_err(|e| Error::io(path, e.into_error()))?
                .finish()
                .map_err(io)?;
        } else {
            let mut w = BufWriter::new(file);
            self.write_to(&mut w).map_err(io)?;
            w.flush().map_err(io)?;
        }
        Ok(())
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(
            &mut *w,
            &ManifestLine {
                manifest: self.manifest.clone(),
            },
        )?;
        w.write_all(b"\n")?;
        for t in self.iter() {
            serde_json::to_writer(&mut *w, &t.to_record())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader: Box<dyn Read> = if is_gzip(path) {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        Self::read_from(BufReader::new(reader)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::schema("empty dataset file"))?;
        let first = first.map_err(|e| Error::io("<dataset>", e))?;
        let header: ManifestLine =
            serde_json::from_str(&first).map_err(|e| Error::schema(format!("manifest line: {e}")))?;
        let mut trajectories = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| Error::schema(format!("line {}: {e}", i + 1)))?;
            trajectories.push(Trajectory::from_record(rec, i + 1)?);
        }
        Dataset::new(header.manifest, trajectories)
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Rolls out the tier's behavior policy for `episodes` episodes. Episode `k`
/// resets with the `k`-th seed drawn from `seed`; action noise comes from a
/// separate stream of the same episode seed.
pub fn generate_dataset(env_id: &EnvId, quality: Quality, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::config("episodes must be positive"));
    }
    let config = env_id.config()?;
    let mut env = Env::new(config.clone())?;
    let expert = scripted_policy("expert", &config)?;
    let n = config.n_agents;
    let obs_dim = config.obs_dim();
    let mut master = SimRng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let ep_seed: u64 = master.random();
        let mut noise_rng = SimRng::seed_from_u64(ep_seed);
        noise_rng.set_stream(1);
        let sigma = quality.episode_noise(k, episodes);
        let mut obs = env.reset(ep_seed);
        let steps = config.episode_length;
        let mut t = Trajectory {
            env_id: env_id.to_string(),
            seed: ep_seed,
            steps,
            n_agents: n,
            obs_dim,
            act_dim: ACT_DIM,
            obs: Vec::with_capacity(steps * n * obs_dim),
            actions: Vec::with_capacity(steps * n * ACT_DIM),
            rewards: Vec::with_capacity(steps * n),
            dones: Vec::with_capacity(steps),
            returns: vec![0.0; n],
        };
        loop {
            let mut a = expert.actions(&obs, &mut noise_rng);
            if sigma > 0.0 {
                a.mapv_inplace(|v| (v + sigma * noise_rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0));
            }
            let out = env.step(&a)?;
            t.obs.extend(obs.iter());
            t.actions.extend(a.iter());
            t.rewards.extend_from_slice(&out.rewards);
            for (r, x) in t.returns.iter_mut().zip(&out.rewards) {
                *r += x;
            }
            t.dones.push(out.done);
            obs = out.obs;
            if out.done {
                break;
            }
        }
        trajectories.push(t);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        env_id: env_id.to_string(),
        generator: quality.to_string(),
        seed,
        trajectories: episodes,
        transitions: episodes * config.episode_length,
        n_agents: n,
        obs_dim,
        act_dim: ACT_DIM,
        obs_encoding: OBS_ENCODING.to_string(),
        augmentation: None,
    };
    Dataset::new(manifest, trajectories)
}

/// Linear-interpolation quantile of unsorted values, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Threshold set for augmentation: explicit values or the dataset's
/// 50/70/90% return quantiles.
/// Serialized as the string `"auto"` or a list of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdsRepr", into = "ThresholdsRepr")]
pub enum Thresholds {
    Auto,
    Values(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdsRepr {
    Text(String),
    List(Vec<f64>),
}

impl TryFrom<ThresholdsRepr> for Thresholds {
    type Error = Error;

    fn try_from(r: ThresholdsRepr) -> Result<Self> {
        match r {
            ThresholdsRepr::Text(s) => s.parse(),
            ThresholdsRepr::List(v) => Ok(Thresholds::Values(v)),
        }
    }
}

impl From<Thresholds> for ThresholdsRepr {
    fn from(t: Thresholds) -> Self {
        match t {
            Thresholds::Auto => ThresholdsRepr::Text("auto".into()),
            Thresholds::Values(v) => ThresholdsRepr::List(v),
        }
    }
}

pub const AUTO_QUANTILES: [f64; 3] = [0.5, 0.7, 0.9];

impl Thresholds {
    /// Concrete threshold values, sorted ascending.
    pub fn resolve(&self, dataset: &Dataset, kind: ReturnKind) -> Result<Vec<f64>> {
        let mut values = match self {
            Thresholds::Values(v) => v.clone(),
            Thresholds::Auto => {
                if dataset.is_empty() {
                    return Err(Error::contract("automatic thresholds need a nonempty dataset"));
                }
                let returns = dataset.returns(kind);
                AUTO_QUANTILES.iter().map(|&q| quantile(&returns, q)).collect()
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("thresholds must be finite"));
        }
        values.sort_by(f64::total_cmp);
        Ok(values)
    }
}

impl FromStr for Thresholds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto" {
            return Ok(Thresholds::Auto);
        }
        if s.is_empty() {
            return Ok(Thresholds::Values(Vec::new()));
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad threshold '{p}'")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Thresholds::Values)
    }
}

/// Per-step transition references `(member, t)` over a dataset, flattened once.
#[derive(Debug, Clone)]
pub struct TransitionIndex {
    dataset: Dataset,
    refs: Vec<(u32, u32)>,
}

impl TransitionIndex {
    pub fn new(dataset: Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::contract("empty dataset"));
        }
        let mut refs = Vec::with_capacity(dataset.transition_count());
        for (i, t) in dataset.iter().enumerate() {
            refs.extend((0..t.steps).map(|s| (i as u32, s as u32)));
        }
        Ok(TransitionIndex { dataset, refs })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Draws `size` transitions of `agent` uniformly with replacement. The next
    /// observation of a final step is the step's own observation (masked by `done`).
    pub fn sample(&self, agent: usize, size: usize, rng: &mut SimRng) -> Result<Transitions> {
        let m = self.dataset.manifest();
        if agent >= m.n_agents {
            return Err(Error::contract(format!("agent {agent} out of range")));
        }
        if size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        let picks: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.refs.len())).collect();
        Ok(self.gather(agent, &picks))
    }

    /// Assembles the transitions at the given flat indices.
    pub fn gather(&self, agent: usize, picks: &[usize]) -> Transitions {
        let m = self.dataset.manifest();
        let rows = picks.len();
        let mut obs = Matrix::zeros((rows, m.obs_dim));
        let mut next_obs = Matrix::zeros((rows, m.obs_dim));
        let mut act = Matrix::zeros((rows, m.act_dim));
        let mut reward = Vec::with_capacity(rows);
        let mut done = Vec::with_capacity(rows);
        for (r, &k) in picks.iter().enumerate() {
            let (i, s) = self.refs[k];
            let traj = self.dataset.get(i as usize);
            let s = s as usize;
            obs.row_mut(r)
                .assign(&ndarray::ArrayView1::from(traj.obs_row(s, agent)));
            act.row_mut(r)
                .assign(&ndarray::ArrayView1::from(traj.action_row(s, agent)));
            let next = if s + 1 < traj.steps { s + 1 } else { s };
            next_obs
                .row_mut(r)
                .assign(&ndarray::ArrayView1::from(traj.obs_row(next, agent)));
            reward.push(traj.reward(s, agent));
            done.push(traj.dones[s] || s + 1 == traj.steps);
        }
        Transitions {
            obs,
            act,
            reward,
            next_obs,
            done,
        }
    }

    /// Member index of the trajectory behind flat transition `k`.
    pub fn member_of(&self, k: usize) -> usize {
        self.refs[k].0 as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(returns: &[f64]) -> Dataset {
        let trajectories: Vec<Trajectory> = returns
            .iter()
            .enumerate()
            .map(|(i, &r)| Trajectory {
                env_id: "toy".into(),
                seed: i as u64,
                steps: 1,
                n_agents: 1,
                obs_dim: 1,
                act_dim: 1,
                obs: vec![i as f64],
                actions: vec![0.0],
                rewards: vec![r],
                dones: vec![true],
                returns: vec![r],
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            env_id: "toy".into(),
            generator: "test".into(),
            seed: 0,
            trajectories: returns.len(),
            transitions: returns.len(),
            n_agents: 1,
            obs_dim: 1,
            act_dim: 1,
            obs_encoding: "toy".into(),
            augmentation: None,
        };
        Dataset::new(manifest, trajectories).unwrap()
    }

    fn multiplicities(ds: &Dataset, n: usize) -> Vec<usize> {
        let mut m = vec![0; n];
        for &k in ds.member_ids() {
            m[k] += 1;
        }
        m
    }

    #[test]
    fn augmentation_examples() {
        let ds = toy(&[5.0, 15.0, 25.0]);
        let aug = ds.augment(&[10.0, 20.0], ReturnKind::Joint);
        assert_eq!(multiplicities(&aug, 3), vec![1, 2, 3]);
        assert_eq!(aug.len(), 6);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.augment(&[], ReturnKind::Joint).member_ids(), ds.member_ids());
        let ds = toy(&[15.0]);
        assert_eq!(ds.augment(&[10.0, 10.0], ReturnKind::Joint).len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn multiplicity_formula(
            returns in prop::collection::vec(-50.0f64..50.0, 1..20),
            thresholds in prop::collection::vec(-60.0f64..60.0, 0..6),
        ) {
            let ds = toy(&returns);
            let before = ds.clone();
            let aug = ds.augment(&thresholds, ReturnKind::Joint);
            let m = multiplicities(&aug, returns.len());
            for (i, r) in returns.iter().enumerate() {
                prop_assert_eq!(m[i], 1 + thresholds.iter().filter(|&&t| *r >= t).count());
            }
            prop_assert_eq!(ds, before);
        }
    }

    #[test]
    fn duplicated_trajectory_is_sampled_three_times_as_often() {
        let ds = toy(&[1.0, 10.0]);
        let aug = ds.augment(&[5.0, 5.0], ReturnKind::Joint);
        let index = TransitionIndex::new(aug).unwrap();
        let mut rng = SimRng::seed_from_u64(77);
        let draws = 100_000;
        let batch = index.sample(0, draws, &mut rng).unwrap();
        let hi = batch.reward.iter().filter(|&&r| r == 10.0).count() as f64;
        let lo = draws as f64 - hi;
        let (e_hi, e_lo) = (0.75 * draws as f64, 0.25 * draws as f64);
        let chi2 = (hi - e_hi).powi(2) / e_hi + (lo - e_lo).powi(2) / e_lo;
        assert!(chi2 < 6.635, "chi2={chi2}");
    }

    #[test]
    fn single_transition_sampling_and_determinism() {
        let index = TransitionIndex::new(toy(&[3.0])).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        let b = index.sample(0, 1, &mut rng).unwrap();
        assert_eq!(b.reward, vec![3.0]);
        assert_eq!(b.obs[[0, 0]], 0.0);
        assert!(b.done[0]);
        let index = TransitionIndex::new(toy(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let run = || {
            let mut rng = SimRng::seed_from_u64(5);
            (0..3)
                .map(|_| index.sample(0, 8, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        assert!(matches!(
            TransitionIndex::new(
                toy(&[1.0])
                    .augment(&[], ReturnKind::Joint)
                    .augment(&[], ReturnKind::Joint)
            )
            .unwrap()
            .sample(1, 1, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let id: EnvId = "coop_nav_3a6l".parse().unwrap();
        let a = generate_dataset(&id, Quality::Expert, 6, 42).unwrap();
        let b = generate_dataset(&id, Quality::Expert, 6, 42).unwrap();
        let (pa, pb, pz) = (
            dir.path().join("a.jsonl"),
            dir.path().join("b.jsonl"),
            dir.path().join("a.jsonl.gz"),
        );
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        a.save(&pz).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(Dataset::load(&pa).unwrap(), a);
        assert_eq!(Dataset::load(&pz).unwrap(), a);
        let t = a.get(0);
        assert_eq!(t.steps, 25);
        assert!(t.dones[24] && !t.dones[23]);
    }

    #[test]
    fn tampered_returns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let id: EnvId = "coop_nav_3a3l".parse().unwrap();
        let ds = generate_dataset(&id, Quality::Medium, 2, 1).unwrap();
        let p = dir.path().join("d.jsonl");
        ds.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        v["returns"][0] = serde_json::json!(v["returns"][0].as_f64().unwrap() + 1e-3);
        lines[1] = v.to_string();
        std::fs::write(&p, lines.join("\n")).unwrap();
        assert!(matches!(Dataset::load(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn medium_expert_is_an_even_mixture() {
        let experts = (0..100)
            .filter(|&k| Quality::MediumExpert.episode_noise(k, 100) == 0.0)
            .count();
        assert_eq!(experts, 50);
        assert_eq!(Quality::MediumReplay.episode_noise(0, 11), 1.5);
        assert!((Quality::MediumReplay.episode_noise(10, 11) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tier_returns_are_ordered() {
        let id: EnvId = "coop_nav_3a6l".parse().unwrap();
        let mean = |q| {
            let r = generate_dataset(&id, q, 200, 9).unwrap().returns(ReturnKind::Joint);
            r.iter().sum::<f64>() / r.len() as f64
        };
        let (e, me, m, mr) = (
            mean(Quality::Expert),
            mean(Quality::MediumExpert),
            mean(Quality::Medium),
            mean(Quality::MediumReplay),
        );
        assert!(e > me && me > m && m > mr, "{e} {me} {m} {mr}");
    }

    #[test]
    fn auto_thresholds_are_quantiles() {
        let ds = toy(&[0.0, 10.0, 20.0, 30.0, 40.0]);
        let r = Thresholds::Auto.resolve(&ds, ReturnKind::Joint).unwrap();
        assert_eq!(r, vec![20.0, 28.0, 36.0]);
        assert_eq!(
            "3, 1,2"
                .parse::<Thresholds>()
                .unwrap()
                .resolve(&ds, ReturnKind::Joint)
                .unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert!("x".parse::<Thresholds>().is_err());
        for t in [Thresholds::Auto, Thresholds::Values(vec![1.5, 2.0])] {
            let text = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<Thresholds>(&text).unwrap(), t);
        }
        assert_eq!(serde_json::to_string(&Thresholds::Auto).unwrap(), "\"auto\"");
        assert_eq!(
            serde_json::from_str::<Thresholds>("\"1,2\"").unwrap(),
            Thresholds::Values(vec![1.0, 2.0])
        );
        assert!(matches!("ultra".parse::<Quality>(), Err(Error::Lookup { .. })));
    }
}
