use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::params::{BoundParams, ParamSet};
use crate::error::{Error, Result};
use crate::tape::{Graph, Matrix, Var};
use crate::SimRng;

const OUTPUT_INIT_SCALE: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
}

/// Which statistics the input normalization layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    /// Statistics of the rows passed to this forward call.
    Batch,
    /// Running statistics accumulated during training.
    Running,
}

/// Batch statistics observed by a training-mode forward pass, to be folded
/// into the running statistics by [`QNetwork::commit_stats`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

/// `Q(o, a)`: batch norm over `[o, a]`, two Mish hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    config: QConfig,
    params: ParamSet,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

impl QNetwork {
    pub fn new(config: QConfig, rng: &mut SimRng) -> Result<Self> {
        if config.obs_dim == 0 || config.act_dim == 0 || config.hidden == 0 {
            return Err(Error::config("Q network dimensions must be positive"));
        }
        let input = config.obs_dim + config.act_dim;
        let h = config.hidden;
        let mut params = ParamSet::new();
        params.push("bn.gamma", 1, input, || 1.0);
        params.push("bn.beta", 1, input, || 0.0);
        let b_in = 1.0 / (input as f64).sqrt();
        let b_h = 1.0 / (h as f64).sqrt();
        params.push_uniform("fc1.weight", input, h, b_in, rng);
        params.push_uniform("fc1.bias", 1, h, b_in, rng);
        params.push_uniform("fc2.weight", h, h, b_h, rng);
        params.push_uniform("fc2.bias", 1, h, b_h, rng);
        params.push_uniform("output.weight", h, 1, OUTPUT_INIT_SCALE, rng);
        params.push_uniform("output.bias", 1, 1, OUTPUT_INIT_SCALE, rng);
        Ok(QNetwork {
            config,
            params,
            running_mean: Array1::zeros(input),
            running_var: Array1::ones(input),
        })
    }

    pub fn from_parts(
        config: QConfig,
        params: ParamSet,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    ) -> Result<Self> {
        let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(0);
        let template = QNetwork::new(config, &mut rng)?;
        let input = config.obs_dim + config.act_dim;
        if !template.params.is_congruent(&params) || running_mean.len() != input || running_var.len() != input {
            return Err(Error::schema("Q network parameters do not match its configuration"));
        }
        Ok(QNetwork {
            config,
            params,
            running_mean: Array1::from(running_mean),
            running_var: Array1::from(running_var),
        })
    }

    pub fn config(&self) -> &QConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn running_mean(&self) -> &Array1<f64> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Array1<f64> {
        &self.running_var
    }

    pub fn zero_output_layer(&mut self) {
        self.params.tensor_mut(6).fill(0.0);
        self.params.tensor_mut(7).fill(0.0);
    }

    /// Builds `Q` for `obs`/`act` rows into `g`; returns an `n x 1` node and,
    /// in [`Norm::Batch`] mode, the batch statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        obs: Var,
        act: Var,
        norm: Norm,
    ) -> Result<(Var, Option<BatchStats>)> {
        let rows = g.value(obs).nrows();
        if g.value(obs).ncols() != self.config.obs_dim || g.value(act).dim() != (rows, self.config.act_dim) {
            return Err(Error::contract(format!(
                "Q network expects obs dim {} and act dim {}, got {:?} and {:?}",
                self.config.obs_dim,
                self.config.act_dim,
                g.value(obs).dim(),
                g.value(act).dim()
            )));
        }
        let x = g.concat_cols(&[obs, act]);
        let (normed, stats) = match norm {
            Norm::Batch => {
                let (y, mean, var) = g.batch_norm_train(x, p.get(0), p.get(1));
                (y, Some(BatchStats { mean, var, count: rows }))
            }
            Norm::Running => (
                g.batch_norm_eval(x, p.get(0), p.get(1), &self.running_mean, &self.running_var),
                None,
            ),
        };
        let h = g.affine(normed, p.get(2), p.get(3));
        let h = g.mish(h);
        let h = g.affine(h, p.get(4), p.get(5));
        let h = g.mish(h);
        let q = g.affine(h, p.get(6), p.get(7));
        Ok((q, stats))
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn commit_stats(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + &(&stats.var * (correction * BN_MOMENTUM));
    }

    /// Soft-updates parameters and running statistics toward `online`.
    pub fn soft_update_from(&mut self, online: &QNetwork, rho: f64) -> Result<()> {
        super::soft_update(self.params.as_mut_slice(), online.params.as_slice(), rho)?;
        let (rm, rv) = (
            self.running_mean.as_slice_mut().expect("contiguous"),
            self.running_var.as_slice_mut().expect("contiguous"),
        );
        super::soft_update(rm, online.running_mean.as_slice().expect("contiguous"), rho)?;
        super::soft_update(rv, online.running_var.as_slice().expect("contiguous"), rho)?;
        Ok(())
    }

    /// Gradient-free evaluation with running statistics.
    pub fn predict(&self, obs: &Matrix, act: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let o = g.constant(obs.clone());
        let a = g.constant(act.clone());
        let (q, _) = self.forward(&mut g, &p, o, a, Norm::Running)?;
        Ok(g.value(q).clone())
    }
}
