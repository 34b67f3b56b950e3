use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{BoundParams, ParamSet};
use super::Mode;
use crate::error::{Error, Result};
use crate::tape::{Graph, Matrix, Var};
use crate::SimRng;

pub const EMBED_DIM: usize = 32;
/// Highest angular frequency of the diffusion-time embedding, in radians per unit tau.
const EMBED_MAX_FREQ: f64 = 16.0;
const OUTPUT_INIT_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Diffusion step count; step indices range over `0..=steps`.
    pub steps: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl ScoreConfig {
    pub fn new(obs_dim: usize, act_dim: usize, steps: usize) -> Self {
        ScoreConfig {
            obs_dim,
            act_dim,
            steps,
            hidden: 256,
            blocks: 3,
            dropout: 0.1,
        }
    }
}

/// Sinusoidal embedding of the diffusion time `tau = i / steps` of a step index.
pub fn step_embedding(step: usize, steps: usize) -> [f64; EMBED_DIM] {
    let tau = step as f64 / steps as f64;
    let half = EMBED_DIM / 2;
    let mut out = [0.0; EMBED_DIM];
    for k in 0..half {
        let freq = (EMBED_MAX_FREQ.ln() * k as f64 / (half - 1) as f64).exp();
        out[k] = (tau * freq).sin();
        out[half + k] = (tau * freq).cos();
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Block {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Noise-prediction network `eps(a_noisy, o, i)`.
///
/// Layout: `[embed(i), o, a_noisy] -> Linear -> Mish`, then `blocks` residual
/// blocks `h <- dropout(mish(h + W2 mish(W1 h)))`, then `Linear -> tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    config: ScoreConfig,
    params: ParamSet,
}

impl ScoreNetwork {
    pub fn new(config: ScoreConfig, rng: &mut SimRng) -> Result<Self> {
        validate(&config)?;
        let h = config.hidden;
        let input = EMBED_DIM + config.obs_dim + config.act_dim;
        let mut params = ParamSet::new();
        let b_in = 1.0 / (input as f64).sqrt();
        let b_h = 1.0 / (h as f64).sqrt();
        params.push_uniform("input.weight", input, h, b_in, rng);
        params.push_uniform("input.bias", 1, h, b_in, rng);
        for k in 0..config.blocks {
            params.push_uniform(&format!("block{k}.fc1.weight"), h, h, b_h, rng);
            params.push_uniform(&format!("block{k}.fc1.bias"), 1, h, b_h, rng);
            params.push_uniform(&format!("block{k}.fc2.weight"), h, h, b_h, rng);
            params.push_uniform(&format!("block{k}.fc2.bias"), 1, h, b_h, rng);
        }
        params.push_uniform("output.weight", h, config.act_dim, OUTPUT_INIT_SCALE, rng);
        params.push_uniform("output.bias", 1, config.act_dim, OUTPUT_INIT_SCALE, rng);
        Ok(ScoreNetwork { config, params })
    }

    pub fn from_params(config: ScoreConfig, params: ParamSet) -> Result<Self> {
        validate(&config)?;
        let mut rng = <SimRng as rand::SeedableRng>::seed_from_u64(0);
        let template = ScoreNetwork::new(config, &mut rng)?;
        if !template.params.is_congruent(&params) {
            return Err(Error::schema("score network parameters do not match its configuration"));
        }
        Ok(ScoreNetwork { config, params })
    }

    pub fn config(&self) -> &ScoreConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn output_weight_index(&self) -> usize {
        2 + 4 * self.config.blocks
    }

    /// Zeroes the output layer so the network predicts `tanh(0) = 0` everywhere.
    pub fn zero_output_layer(&mut self) {
        let w = self.output_weight_index();
        self.params.tensor_mut(w).fill(0.0);
        self.params.tensor_mut(w + 1).fill(0.0);
    }

    /// Builds the forward map into `g`. `steps` holds either one index shared by
    /// every row or one index per row.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        a_noisy: Var,
        obs: Var,
        steps: &[usize],
        mut mode: Mode<'_>,
    ) -> Result<Var> {
        let rows = g.value(a_noisy).nrows();
        if g.value(a_noisy).ncols() != self.config.act_dim {
            return Err(Error::contract(format!(
                "score network expects action dim {}, got {}",
                self.config.act_dim,
                g.value(a_noisy).ncols()
            )));
        }
        if g.value(obs).dim() != (rows, self.config.obs_dim) {
            return Err(Error::contract(format!(
                "score network expects observations of shape ({rows}, {}), got {:?}",
                self.config.obs_dim,
                g.value(obs).dim()
            )));
        }
        if steps.len() != 1 && steps.len() != rows {
            return Err(Error::contract("step indices must be shared or given per row"));
        }
        if let Some(&bad) = steps.iter().find(|&&s| s > self.config.steps) {
            return Err(Error::contract(format!(
                "step index {bad} outside 0..={}",
                self.config.steps
            )));
        }

        let table: Vec<[f64; EMBED_DIM]> = (0..=self.config.steps)
            .map(|s| step_embedding(s, self.config.steps))
            .collect();
        let mut emb = Matrix::zeros((rows, EMBED_DIM));
        for (r, mut row) in emb.outer_iter_mut().enumerate() {
            let s = if steps.len() == 1 { steps[0] } else { steps[r] };
            row.assign(&ndarray::ArrayView1::from(&table[s]));
        }
        let emb = g.constant(emb);
        let x = g.concat_cols(&[emb, obs, a_noisy]);
        let pre = g.affine(x, p.get(0), p.get(1));
        let mut h = g.mish(pre);
        for k in 0..self.config.blocks {
            let blk = Block {
                w1: 2 + 4 * k,
                b1: 3 + 4 * k,
                w2: 4 + 4 * k,
                b2: 5 + 4 * k,
            };
            let z = g.affine(h, p.get(blk.w1), p.get(blk.b1));
            let z = g.mish(z);
            let z = g.affine(z, p.get(blk.w2), p.get(blk.b2));
            let sum = g.add(h, z);
            h = g.mish(sum);
            if let Mode::Train(rng) = &mut mode {
                h = dropout(g, h, self.config.dropout, rng);
            }
        }
        let w = self.output_weight_index();
        let out = g.affine(h, p.get(w), p.get(w + 1));
        Ok(g.tanh(out))
    }

    /// Gradient-free evaluation-mode forward pass.
    pub fn predict(&self, a_noisy: &Matrix, obs: &Matrix, step: usize) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let a = g.constant(a_noisy.clone());
        let o = g.constant(obs.clone());
        let out = self.forward(&mut g, &p, a, o, &[step], Mode::Eval)?;
        Ok(g.value(out).clone())
    }
}

fn validate(config: &ScoreConfig) -> Result<()> {
    if config.obs_dim == 0 || config.act_dim == 0 || config.hidden == 0 || config.steps == 0 {
        return Err(Error::config("score network dimensions must be positive"));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::config(format!("dropout rate {} outside [0, 1)", config.dropout)));
    }
    Ok(())
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
pub(crate) fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut SimRng) -> Var {
    if rate == 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let dim = g.value(x).dim();
    let mask = Matrix::from_shape_simple_fn(dim, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    g.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ScoreNetwork {
        let mut rng = SimRng::seed_from_u64(3);
        let cfg = ScoreConfig {
            hidden: 8,
            blocks: 2,
            ..ScoreConfig::new(3, 2, 5)
        };
        ScoreNetwork::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut net = tiny();
        net.zero_output_layer();
        let a = Matrix::from_shape_fn((4, 2), |(i, j)| i as f64 - j as f64);
        let o = Matrix::from_elem((4, 3), 0.7);
        let out = net.predict(&a, &o, 3).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_bounded() {
        let net = tiny();
        let a = Matrix::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64 * 0.3 - 1.0);
        let o = Matrix::from_shape_fn((5, 3), |(i, j)| (i + j) as f64 * 0.1);
        let x = net.predict(&a, &o, 2).unwrap();
        let y = net.predict(&a, &o, 2).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.dim(), (5, 2));
        assert!(x.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let net = tiny();
        let a = Matrix::zeros((2, 3));
        let o = Matrix::zeros((2, 3));
        assert!(matches!(net.predict(&a, &o, 0), Err(Error::Contract(_))));
        let a = Matrix::zeros((2, 2));
        assert!(matches!(net.predict(&a, &o, 6), Err(Error::Contract(_))));
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let e0 = step_embedding(0, 5);
        let e1 = step_embedding(1, 5);
        assert_eq!(e0[EMBED_DIM / 2], 1.0);
        assert!(e0.iter().zip(e1.iter()).any(|(a, b)| (a - b).abs() > 0.1));
    }

    #[test]
    fn train_mode_drops_units() {
        let net = tiny();
        let a = Matrix::from_elem((64, 2), 0.5);
        let o = Matrix::from_elem((64, 3), 0.5);
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let av = g.constant(a.clone());
        let ov = g.constant(o.clone());
        let mut rng = SimRng::seed_from_u64(1);
        let out = net.forward(&mut g, &p, av, ov, &[1], Mode::Train(&mut rng)).unwrap();
        let first = g.value(out).row(0).to_owned();
        assert!(g.value(out).outer_iter().any(|r| r != first));
    }
}
