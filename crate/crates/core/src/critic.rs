//! Conservative twin critics: double-Q targets and the CQL-regularized loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximators::{Adam, BatchStats, BoundParams, Norm, QConfig, QNetwork};
use crate::error::{Error, Result};
use crate::tape::{Graph, Matrix, Var};
use crate::SimRng;

/// Whether the regularizer subtracts `ln M` from the log-sum-exp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    #[default]
    Literal,
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub gamma: f64,
    pub zeta: f64,
    /// Uniform random actions per observation in the regularizer.
    pub samples: usize,
    pub regularizer: Regularizer,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            gamma: 0.95,
            zeta: 5.0,
            samples: 10,
            regularizer: Regularizer::Literal,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::config(format!(
                "zeta {} must be finite and non-negative",
                self.zeta
            )));
        }
        if self.samples == 0 {
            return Err(Error::config("CQL sample count must be positive"));
        }
        Ok(())
    }
}

/// A minibatch of transitions, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub obs: Matrix,
    pub act: Matrix,
    pub reward: Vec<f64>,
    pub next_obs: Matrix,
    pub done: Vec<bool>,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::contract("empty batch"));
        }
        if self.act.nrows() != n || self.reward.len() != n || self.next_obs.nrows() != n || self.done.len() != n {
            return Err(Error::contract("transition fields have inconsistent row counts"));
        }
        Ok(())
    }
}

/// Online and target copies of the twin critics.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair {
    pub online: [QNetwork; 2],
    pub target: [QNetwork; 2],
    pub config: CriticConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CriticDiagnostics {
    pub loss: f64,
    pub td_loss: f64,
    pub regularizer: f64,
    pub q_data: f64,
    pub q_random: f64,
    pub target_mean: f64,
}

impl CriticPair {
    /// Two independently initialized critics; targets start as exact copies.
    pub fn new(q: QConfig, config: CriticConfig, rng: &mut SimRng) -> Result<Self> {
        config.validate()?;
        let a = QNetwork::new(q, rng)?;
        let b = QNetwork::new(q, rng)?;
        Ok(CriticPair {
            target: [a.clone(), b.clone()],
            online: [a, b],
            config,
        })
    }

    /// `y = r + (1 - done) gamma min_k Qbar_k(o', a')`, outside any graph.
    pub fn td_target(&self, batch: &Transitions, next_actions: &Matrix) -> Result<Vec<f64>> {
        batch.validate()?;
        let gamma = self.config.gamma;
        let q1 = self.target[0].predict(&batch.next_obs, next_actions)?;
        let q2 = self.target[1].predict(&batch.next_obs, next_actions)?;
        Ok((0..batch.len())
            .map(|r| {
                let reward = batch.reward[r];
                if batch.done[r] || gamma == 0.0 {
                    reward
                } else {
                    reward + gamma * q1[[r, 0]].min(q2[[r, 0]])
                }
            })
            .collect())
    }

    /// CQL loss over both online critics, built into `g` against fixed targets `y`.
    ///
    /// Data rows use batch statistics (returned for committing); the `M`
    /// uniform actions per row are scored with running statistics so the
    /// penalty acts on the same function used for evaluation and guidance.
    pub fn cql_loss(
        &self,
        g: &mut Graph,
        bound: [&BoundParams; 2],
        batch: &Transitions,
        y: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Var, CriticDiagnostics, [BatchStats; 2])> {
        batch.validate()?;
        if y.len() != batch.len() {
            return Err(Error::contract("one target per transition required"));
        }
        let rows = batch.len();
        let m = self.config.samples;
        let zeta = self.config.zeta;
        let obs = g.constant(batch.obs.clone());
        let act = g.constant(batch.act.clone());
        let target = g.constant(Matrix::from_shape_vec((rows, 1), y.to_vec()).expect("column"));

        let random = if zeta > 0.0 {
            let d_a = batch.act.ncols();
            let rand_act = Matrix::from_shape_simple_fn((rows * m, d_a), || rng.random_range(-1.0..=1.0));
            let rep_obs = Matrix::from_shape_fn((rows * m, batch.obs.ncols()), |(r, c)| batch.obs[[r / m, c]]);
            Some((g.constant(rep_obs), g.constant(rand_act)))
        } else {
            None
        };

        let mut td_terms = Vec::with_capacity(2);
        let mut reg_terms = Vec::with_capacity(2);
        let mut stats = Vec::with_capacity(2);
        let mut diag = CriticDiagnostics {
            target_mean: y.iter().sum::<f64>() / rows as f64,
            ..Default::default()
        };
        for (k, p) in bound.iter().enumerate() {
            let net = &self.online[k];
            let (q, s) = net.forward(g, p, obs, act, Norm::Batch)?;
            stats.push(s.expect("batch mode yields statistics"));
            diag.q_data += g.value(q).mean().expect("nonempty") / 2.0;
            let err = g.sub(q, target);
            let sq = g.square(err);
            td_terms.push(g.mean(sq));
            if let Some((rep_obs, rand_act)) = random {
                let (qr, _) = net.forward(g, p, rep_obs, rand_act, Norm::Running)?;
                diag.q_random += g.value(qr).mean().expect("nonempty") / 2.0;
                let qr = g.reshape(qr, rows, m);
                let lse = g.logsumexp_rows(qr);
                let gap = g.sub(lse, q);
                reg_terms.push(g.mean(gap));
            }
        }
        let td_sum = g.add(td_terms[0], td_terms[1]);
        let td = g.scale(td_sum, 0.5);
        diag.td_loss = g.scalar(td);
        let loss = if reg_terms.is_empty() {
            td
        } else {
            let reg_sum = g.add(reg_terms[0], reg_terms[1]);
            let mut reg = g.scale(reg_sum, 0.5);
            if self.config.regularizer == Regularizer::Corrected {
                let shift = g.constant(Matrix::from_elem((1, 1), (m as f64).ln()));
                reg = g.sub(reg, shift);
            }
            diag.regularizer = g.scalar(reg);
            g.axpby(td, 1.0, reg, zeta)
        };
        diag.loss = g.scalar(loss);
        let stats: [BatchStats; 2] = stats.try_into().expect("two critics");
        Ok((loss, diag, stats))
    }

    /// One Adam step of both online critics on the CQL loss with fixed targets.
    pub fn update_with_targets(
        &mut self,
        batch: &Transitions,
        y: &[f64],
        optimizers: &mut [Adam; 2],
        rng: &mut SimRng,
    ) -> Result<CriticDiagnostics> {
        let mut g = Graph::new();
        let p0 = self.online[0].params().bind(&mut g, true);
        let p1 = self.online[1].params().bind(&mut g, true);
        let (loss, diag, stats) = self.cql_loss(&mut g, [&p0, &p1], batch, y, rng)?;
        if !diag.loss.is_finite() {
            return Err(Error::Numerical(format!("critic loss diverged: {}", diag.loss)));
        }
        let grads = g.backward(loss);
        for (k, p) in [&p0, &p1].into_iter().enumerate() {
            let flat = self.online[k].params().flat_grad(&grads, p);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("critic gradient is not finite".into()));
            }
            optimizers[k].apply(self.online[k].params_mut().as_mut_slice(), &flat)?;
            self.online[k].commit_stats(&stats[k]);
        }
        Ok(diag)
    }

    /// Computes targets from the target critics at `next_actions`, then updates.
    pub fn update(
        &mut self,
        batch: &Transitions,
        next_actions: &Matrix,
        optimizers: &mut [Adam; 2],
        rng: &mut SimRng,
    ) -> Result<CriticDiagnostics> {
        let y = self.td_target(batch, next_actions)?;
        self.update_with_targets(batch, &y, optimizers, rng)
    }

    /// Soft-updates both targets toward their online critics.
    pub fn update_targets(&mut self, rho: f64) -> Result<()> {
        for k in 0..2 {
            self.target[k].soft_update_from(&self.online[k], rho)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximators::{grad_check, ParamSet};
    use rand::SeedableRng;

    const Q: QConfig = QConfig {
        obs_dim: 3,
        act_dim: 2,
        hidden: 6,
    };

    fn pair(config: CriticConfig, seed: u64) -> CriticPair {
        let mut rng = SimRng::seed_from_u64(seed);
        CriticPair::new(Q, config, &mut rng).unwrap()
    }

    fn batch(rows: usize) -> Transitions {
        Transitions {
            obs: Matrix::from_shape_fn((rows, 3), |(r, c)| ((r * 3 + c) as f64 * 0.53).sin()),
            act: Matrix::from_shape_fn((rows, 2), |(r, c)| ((r * 2 + c) as f64 * 0.91).cos() * 0.8),
            reward: (0..rows).map(|r| (r as f64 * 0.3).sin()).collect(),
            next_obs: Matrix::from_shape_fn((rows, 3), |(r, c)| ((r * 3 + c) as f64 * 0.29).cos()),
            done: (0..rows).map(|r| r % 4 == 3).collect(),
        }
    }

    fn set_constant(q: &mut QNetwork, c: f64) {
        q.zero_output_layer();
        q.params_mut().tensor_mut(7)[0] = c;
    }

    fn loss_value(pair: &CriticPair, b: &Transitions, y: &[f64], seed: u64) -> (f64, CriticDiagnostics) {
        let mut g = Graph::new();
        let p0 = pair.online[0].params().bind(&mut g, false);
        let p1 = pair.online[1].params().bind(&mut g, false);
        let mut rng = SimRng::seed_from_u64(seed);
        let (loss, diag, _) = pair.cql_loss(&mut g, [&p0, &p1], b, y, &mut rng).unwrap();
        (g.scalar(loss), diag)
    }

    #[test]
    fn zero_gamma_target_is_reward() {
        let p = pair(
            CriticConfig {
                gamma: 0.0,
                ..Default::default()
            },
            1,
        );
        let b = batch(6);
        let y = p.td_target(&b, &b.act).unwrap();
        assert_eq!(y, b.reward);
    }

    #[test]
    fn terminal_target_is_reward() {
        let mut p = pair(CriticConfig::default(), 2);
        for q in p.target.iter_mut() {
            set_constant(q, 10.0);
        }
        let mut b = batch(1);
        b.reward = vec![2.0];
        b.done = vec![true];
        assert_eq!(p.td_target(&b, &b.act).unwrap(), vec![2.0]);
        b.done = vec![false];
        assert!((p.td_target(&b, &b.act).unwrap()[0] - 11.5).abs() < 1e-12);
    }

    #[test]
    fn zero_target_critics_give_reward() {
        let mut p = pair(CriticConfig::default(), 3);
        for q in p.target.iter_mut() {
            q.zero_output_layer();
        }
        let b = batch(5);
        assert_eq!(p.td_target(&b, &b.act).unwrap(), b.reward);
    }

    #[test]
    fn twin_minimum_is_used() {
        let mut p = pair(CriticConfig::default(), 4);
        set_constant(&mut p.target[0], 3.0);
        set_constant(&mut p.target[1], -1.0);
        let mut b = batch(1);
        b.done = vec![false];
        b.reward = vec![0.0];
        assert!((p.td_target(&b, &b.act).unwrap()[0] + 0.95).abs() < 1e-12);
    }

    #[test]
    fn constant_q_regularizer_is_log_m() {
        let mut p = pair(CriticConfig::default(), 5);
        for q in p.online.iter_mut() {
            set_constant(q, 1.75);
        }
        let b = batch(7);
        let y = vec![1.75; 7];
        let (_, diag) = loss_value(&p, &b, &y, 0);
        assert_eq!(diag.td_loss, 0.0);
        assert!((diag.regularizer - 10f64.ln()).abs() < 1e-12);
        p.config.regularizer = Regularizer::Corrected;
        let (_, diag) = loss_value(&p, &b, &y, 0);
        assert!(diag.regularizer.abs() < 1e-12);
    }

    #[test]
    fn zero_zeta_is_pure_td_loss() {
        let p = pair(
            CriticConfig {
                zeta: 0.0,
                ..Default::default()
            },
            6,
        );
        let b = batch(9);
        let y: Vec<f64> = (0..9).map(|r| r as f64 * 0.1).collect();
        let (loss, diag) = loss_value(&p, &b, &y, 0);

        let mut g = Graph::new();
        let mut td = 0.0;
        for q in &p.online {
            let pb = q.params().bind(&mut g, false);
            let o = g.constant(b.obs.clone());
            let a = g.constant(b.act.clone());
            let (out, _) = q.forward(&mut g, &pb, o, a, Norm::Batch).unwrap();
            let v = g.value(out);
            td += (0..9).map(|r| (v[[r, 0]] - y[r]).powi(2)).sum::<f64>() / 9.0;
        }
        assert!((loss - td / 2.0).abs() < 1e-12);
        assert_eq!(loss.to_bits(), diag.td_loss.to_bits());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = pair(CriticConfig::default(), 7);
        let mut g = Graph::new();
        let p0 = p.online[0].params().bind(&mut g, false);
        let p1 = p.online[1].params().bind(&mut g, false);
        let mut rng = SimRng::seed_from_u64(0);
        let r = p.cql_loss(&mut g, [&p0, &p1], &batch(0), &[], &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn cql_loss_regression_value() {
        let p = pair(CriticConfig::default(), 8);
        let b = batch(4);
        let y = p.td_target(&b, &b.act).unwrap();
        let (loss, _) = loss_value(&p, &b, &y, 12);
        assert!((loss - CQL_REGRESSION).abs() < 1e-12, "{loss:.17e}");
    }

    const CQL_REGRESSION: f64 = 11.767_698_892_078_636;

    #[test]
    fn cql_gradient_matches_finite_differences() {
        let p = pair(CriticConfig::default(), 9);
        let b = batch(5);
        let y: Vec<f64> = (0..5).map(|r| 0.2 * r as f64 - 0.3).collect();
        for k in 0..2 {
            let value = |flat: &[f64], want: bool| {
                let mut p = p.clone();
                let shapes = p.online[k].params().manifest().to_vec();
                *p.online[k].params_mut() = ParamSet::from_parts(shapes, flat.to_vec()).unwrap();
                let mut g = Graph::new();
                let p0 = p.online[0].params().bind(&mut g, want && k == 0);
                let p1 = p.online[1].params().bind(&mut g, want && k == 1);
                let mut rng = SimRng::seed_from_u64(4);
                let (loss, _, _) = p.cql_loss(&mut g, [&p0, &p1], &b, &y, &mut rng).unwrap();
                let grad = if want {
                    let grads = g.backward(loss);
                    p.online[k].params().flat_grad(&grads, if k == 0 { &p0 } else { &p1 })
                } else {
                    Vec::new()
                };
                (g.scalar(loss), grad)
            };
            let base = p.online[k].params().as_slice().to_vec();
            let (_, analytic) = value(&base, true);
            let mut rng = SimRng::seed_from_u64(1);
            let report = grad_check(&base, &analytic, |x| value(x, false).0, 120, 1e-4, &mut rng);
            assert!(
                report.passed,
                "critic {k}: {report:?} analytic {}",
                analytic[report.worst_index]
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = pair(CriticConfig::default(), 10);
        let before: Vec<Vec<f64>> = p.online.iter().map(|q| q.params().as_slice().to_vec()).collect();
        let b = batch(6);
        let mut opts = [Adam::new(before[0].len(), 0.0), Adam::new(before[1].len(), 0.0)];
        let mut rng = SimRng::seed_from_u64(0);
        p.update(&b, &b.act, &mut opts, &mut rng).unwrap();
        for (net, b) in p.online.iter().zip(&before) {
            assert_eq!(net.params().as_slice(), b.as_slice());
        }
    }

    #[test]
    fn single_step_reduces_td_error() {
        let mut p = pair(
            CriticConfig {
                zeta: 0.0,
                ..Default::default()
            },
            11,
        );
        let b = batch(1);
        let y = vec![2.0];
        let err = |p: &CriticPair| {
            let q = p.online[0].predict(&b.obs, &b.act).unwrap()[[0, 0]];
            (q - y[0]).abs()
        };
        // With a single row the normalized input is the shift parameter, so Q is
        // affine in the output layer and one small step must move toward y.
        let before = err(&p);
        let n = p.online[0].params().len();
        let mut opts = [Adam::new(n, 1e-3), Adam::new(n, 1e-3)];
        let mut rng = SimRng::seed_from_u64(0);
        p.update_with_targets(&b, &y, &mut opts, &mut rng).unwrap();
        assert!(err(&p) < before);
        assert!(p.target[0] != p.online[0]);
    }

    #[test]
    fn larger_zeta_pushes_random_actions_down() {
        let b = batch(32);
        let y: Vec<f64> = (0..32).map(|r| 1.0 + 0.1 * (r as f64).sin()).collect();
        let gap = |zeta: f64| {
            let mut p = pair(
                CriticConfig {
                    zeta,
                    ..Default::default()
                },
                12,
            );
            let n = p.online[0].params().len();
            let mut opts = [Adam::new(n, 3e-3), Adam::new(n, 3e-3)];
            let mut rng = SimRng::seed_from_u64(5);
            let mut d = CriticDiagnostics::default();
            for _ in 0..100 {
                d = p.update_with_targets(&b, &y, &mut opts, &mut rng).unwrap();
            }
            d.q_random - d.q_data
        };
        let gaps: Vec<f64> = [0.5, 2.0, 8.0].iter().map(|&z| gap(z)).collect();
        assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut p = pair(CriticConfig::default(), 13);
        let b = batch(3);
        let n = p.online[0].params().len();
        let mut opts = [Adam::new(n, 1e-3), Adam::new(n, 1e-3)];
        let mut rng = SimRng::seed_from_u64(0);
        let r = p.update_with_targets(&b, &[f64::NAN, 0.0, 0.0], &mut opts, &mut rng);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
