use serde::{Deserialize, Serialize};

use super::params::{BoundParams, ParamSet};
use crate::error::{Error, Result};
use crate::tape::{Graph, Matrix, Var};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
}

/// Deterministic policy `o -> tanh(MLP(o))` used by the conservative baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicActor {
    config: ActorConfig,
    params: ParamSet,
}

impl DeterministicActor {
    pub fn new(config: ActorConfig, rng: &mut SimRng) -> Result<Self> {
        if config.obs_dim == 0 || config.act_dim == 0 || config.hidden == 0 {
            return Err(Error::config("actor dimensions must be positive"));
        }
        let h = config.hidden;
        let b_in = 1.0 / (config.obs_dim as f64).sqrt();
        let b_h = 1.0 / (h as f64).sqrt();
        let mut params = ParamSet::new();
        params.push_uniform("fc1.weight", config.obs_dim, h, b_in, rng);
        params.push_uniform("fc1.bias", 1, h, b_in, rng);
        params.push_uniform("fc2.weight", h, h, b_h, rng);
        params.push_uniform("fc2.bias", 1, h, b_h, rng);
        params.push_uniform("output.weight", h, config.act_dim, b_h, rng);
        params.push_uniform("output.bias", 1, config.act_dim, b_h, rng);
        Ok(DeterministicActor { config, params })
    }

    pub fn from_params(config: ActorConfig, params: ParamSet) -> Result<Self> {
        let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(0);
        if !DeterministicActor::new(config, &mut rng)?.params.is_congruent(&params) {
            return Err(Error::schema("actor parameters do not match its configuration"));
        }
        Ok(DeterministicActor { config, params })
    }

    pub fn config(&self) -> &ActorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, obs: Var) -> Result<Var> {
        if g.value(obs).ncols() != self.config.obs_dim {
            return Err(Error::contract(format!(
                "actor expects obs dim {}, got {}",
                self.config.obs_dim,
                g.value(obs).ncols()
            )));
        }
        let h = g.affine(obs, p.get(0), p.get(1));
        let h = g.mish(h);
        let h = g.affine(h, p.get(2), p.get(3));
        let h = g.mish(h);
        let out = g.affine(h, p.get(4), p.get(5));
        Ok(g.tanh(out))
    }

    pub fn predict(&self, obs: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let o = g.constant(obs.clone());
        let out = self.forward(&mut g, &p, o)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn outputs_are_bounded() {
        let mut rng = SimRng::seed_from_u64(2);
        let actor = DeterministicActor::new(
            ActorConfig {
                obs_dim: 4,
                act_dim: 2,
                hidden: 16,
            },
            &mut rng,
        )
        .unwrap();
        let o = Matrix::from_shape_fn((10, 4), |(i, j)| (i as f64 - 5.0) * 10.0 + j as f64);
        let a = actor.predict(&o).unwrap();
        assert_eq!(a.dim(), (10, 2));
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }
}
