//! Checkpoint file: `MAGIC`, little-endian `u32` format version, `u64` header
//! length, the JSON header, then every tensor as little-endian `f64` in
//! header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::learners::AgentState;
use crate::error::{Error, Result};
use crate::schedule::ScheduleDescriptor;
use crate::SimRng;

pub const MAGIC: &[u8; 8] = b"DOM2CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentHeader {
    pub tensors: Vec<TensorEntry>,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub schedule: ScheduleDescriptor,
    pub env_id: String,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub step: u64,
    /// Per-agent training streams, positioned after the last completed step.
    pub rngs: Vec<SimRng>,
    pub agents: Vec<AgentHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub agents: Vec<AgentState>,
}

impl Checkpoint {
    /// Assembles a checkpoint; the per-agent tensor tables are derived from `agents`.
    pub fn new(mut header: CheckpointHeader, agents: Vec<AgentState>) -> Self {
        header.agents = agents
            .iter()
            .map(|a| AgentHeader {
                tensors: a
                    .tensors
                    .iter()
                    .map(|(name, data)| TensorEntry {
                        name: name.clone(),
                        len: data.len(),
                    })
                    .collect(),
                counters: a.counters.clone(),
            })
            .collect();
        Checkpoint { header, agents }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let floats: usize = self.agents.iter().flat_map(|a| &a.tensors).map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.agents.iter().flat_map(|a| &a.tensors) {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = MAGIC.len() + 12;
        if bytes.len() < fixed || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::schema("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| fixed.checked_add(n))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::schema("checkpoint header is truncated"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[fixed..header_end])
            .map_err(|e| Error::schema(format!("checkpoint header: {e}")))?;
        if header.agents.len() != header.n_agents || header.rngs.len() != header.n_agents {
            return Err(Error::schema("checkpoint header disagrees on the agent count"));
        }
        let mut cursor = header_end;
        let mut agents = Vec::with_capacity(header.n_agents);
        for a in &header.agents {
            let mut state = AgentState {
                tensors: Vec::with_capacity(a.tensors.len()),
                counters: a.counters.clone(),
            };
            for t in &a.tensors {
                let end = t
                    .len
                    .checked_mul(8)
                    .and_then(|n| cursor.checked_add(n))
                    .filter(|&end| end <= bytes.len())
                    .ok_or_else(|| Error::schema(format!("checkpoint data ends inside tensor `{}`", t.name)))?;
                let data = bytes[cursor..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                state.tensors.push((t.name.clone(), data));
                cursor = end;
            }
            agents.push(state);
        }
        if cursor != bytes.len() {
            return Err(Error::schema("trailing bytes after checkpoint data"));
        }
        Ok(Checkpoint { header, agents })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
