//! Diffusion policy: score-matching loss, first-order DPM-solver sampling,
//! the Q-guided policy loss and a probability-flow ODE integrator used as a
//! test oracle.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approximators::{BoundParams, Mode, Norm, QNetwork, ScoreNetwork};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tape::{Graph, Matrix, Var};
use crate::SimRng;

/// Floor for the `abs` normalizer of the Q-guidance weight.
pub const ABS_NORM_FLOOR: f64 = 1e-6;
/// Below this magnitude the signed normalizer is rejected.
pub const PAPER_NORM_GUARD: f64 = 1e-8;

/// Anything that predicts the injected noise from `(a_noisy, o, i)`.
///
/// [`ScoreNetwork`] is the production implementation; tests plug in stubs.
pub trait NoisePredictor {
    fn act_dim(&self) -> usize;
    fn steps(&self) -> usize;
    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams;
    fn predict_noise(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        a_noisy: Var,
        obs: Var,
        steps: &[usize],
        mode: Mode<'_>,
    ) -> Result<Var>;
}

impl NoisePredictor for ScoreNetwork {
    fn act_dim(&self) -> usize {
        self.config().act_dim
    }

    fn steps(&self) -> usize {
        self.config().steps
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        self.params().bind(g, trainable)
    }

    fn predict_noise(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        a_noisy: Var,
        obs: Var,
        steps: &[usize],
        mode: Mode<'_>,
    ) -> Result<Var> {
        self.forward(g, p, a_noisy, obs, steps, mode)
    }
}

/// How the Q-guidance weight is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QNormMode {
    /// `D = max(mean |Q(o, a_data)|, 1e-6)`.
    #[default]
    Abs,
    /// `D = mean Q(o, a_data)`, rejected when near zero.
    Paper,
}

/// Which critic guides the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    #[default]
    First,
    MinTwin,
}

/// Actions for a batch of observations, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    /// Final actions clamped to `[-1, 1]`.
    pub action: Matrix,
    /// The `a^{tau_0}` iterate before clamping.
    pub unclamped: Matrix,
    /// The `a^{tau_N}` draw the chain started from.
    pub terminal_noise: Matrix,
    /// `a^{tau_N}, ..., a^{tau_0}` when requested, otherwise empty.
    pub intermediates: Vec<Matrix>,
}

fn check_batch(obs: &Matrix, act: Option<&Matrix>, act_dim: usize) -> Result<()> {
    if obs.nrows() == 0 {
        return Err(Error::contract("empty batch"));
    }
    if let Some(a) = act {
        if a.dim() != (obs.nrows(), act_dim) {
            return Err(Error::contract(format!(
                "actions of shape {:?} do not match {} observations of action dim {act_dim}",
                a.dim(),
                obs.nrows()
            )));
        }
    }
    Ok(())
}

fn check_steps(net: &impl NoisePredictor, schedule: &NoiseSchedule) -> Result<()> {
    if net.steps() != schedule.steps() {
        return Err(Error::contract(format!(
            "network trained for {} diffusion steps, schedule has {}",
            net.steps(),
            schedule.steps()
        )));
    }
    Ok(())
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut SimRng) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Score-matching loss: mean over rows of `||eps - eps_theta(alpha_i a + sigma_i eps, o, i)||^2`
/// with `i` uniform on `{0, ..., N}` and `eps ~ N(0, I)`, drawn per row in that order.
#[allow(clippy::too_many_arguments)]
pub fn bc_loss(
    g: &mut Graph,
    net: &impl NoisePredictor,
    p: &BoundParams,
    obs: &Matrix,
    act: &Matrix,
    schedule: &NoiseSchedule,
    rng: &mut SimRng,
    mode: Mode<'_>,
) -> Result<Var> {
    check_batch(obs, Some(act), net.act_dim())?;
    check_steps(net, schedule)?;
    let (rows, d_a) = act.dim();
    let mut steps = Vec::with_capacity(rows);
    let mut eps = Matrix::zeros((rows, d_a));
    let mut noisy = Matrix::zeros((rows, d_a));
    for r in 0..rows {
        let i = rng.random_range(0..=schedule.steps());
        steps.push(i);
        let (al, si) = (schedule.alpha()[i], schedule.sigma()[i]);
        for c in 0..d_a {
            let e: f64 = rng.sample(StandardNormal);
            eps[[r, c]] = e;
            noisy[[r, c]] = al * act[[r, c]] + si * e;
        }
    }
    let noisy = g.constant(noisy);
    let o = g.constant(obs.clone());
    let pred = net.predict_noise(g, p, noisy, o, &steps, mode)?;
    let target = g.constant(eps);
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let per_row = g.row_sum(sq);
    Ok(g.mean(per_row))
}

/// Coefficients `(c_keep, c_noise)` of the step `a^{i-1} = c_keep a^i - c_noise eps`.
///
/// This is the exact solution of the probability-flow ODE over `[tau_{i-1}, tau_i]`
/// with the noise prediction frozen at step `i`:
/// `c_noise = sigma_{i-1} (exp(lambda_{i-1} - lambda_i) - 1)`.
pub fn solver_coefficients(schedule: &NoiseSchedule, i: usize) -> (f64, f64) {
    let (a, s) = (schedule.alpha(), schedule.sigma());
    let keep = a[i - 1] / a[i];
    let noise = a[i - 1] * s[i] / a[i] - s[i - 1];
    (keep, noise)
}

/// Runs the denoising chain in `g` from `terminal`, returning the unclamped
/// `a^{tau_0}` node and, if `keep`, every iterate.
#[allow(clippy::too_many_arguments)]
pub fn denoise(
    g: &mut Graph,
    net: &impl NoisePredictor,
    p: &BoundParams,
    obs: Var,
    terminal: Var,
    schedule: &NoiseSchedule,
    mut mode: Mode<'_>,
    keep: bool,
) -> Result<(Var, Vec<Matrix>)> {
    check_steps(net, schedule)?;
    let mut a = terminal;
    let mut trail = Vec::new();
    if keep {
        trail.push(g.value(a).clone());
    }
    for i in (1..=schedule.steps()).rev() {
        let eps = net.predict_noise(g, p, a, obs, &[i], mode.reborrow())?;
        let (c_keep, c_noise) = solver_coefficients(schedule, i);
        a = g.axpby(a, c_keep, eps, -c_noise);
        if keep {
            trail.push(g.value(a).clone());
        }
    }
    Ok((a, trail))
}

/// Evaluation-mode sampling from fresh terminal noise.
pub fn sample_action(
    net: &impl NoisePredictor,
    obs: &Matrix,
    schedule: &NoiseSchedule,
    rng: &mut SimRng,
) -> Result<PolicySample> {
    check_batch(obs, None, net.act_dim())?;
    let noise = standard_normal(obs.nrows(), net.act_dim(), rng);
    sample_from_noise(net, obs, schedule, noise, false)
}

/// Deterministic evaluation-mode sampling from the given `a^{tau_N}`.
pub fn sample_from_noise(
    net: &impl NoisePredictor,
    obs: &Matrix,
    schedule: &NoiseSchedule,
    terminal_noise: Matrix,
    keep_intermediates: bool,
) -> Result<PolicySample> {
    check_batch(obs, Some(&terminal_noise), net.act_dim())?;
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let o = g.constant(obs.clone());
    let a = g.constant(terminal_noise.clone());
    let (out, intermediates) = denoise(&mut g, net, &p, o, a, schedule, Mode::Eval, keep_intermediates)?;
    let unclamped = g.value(out).clone();
    Ok(PolicySample {
        action: unclamped.mapv(|v| v.clamp(-1.0, 1.0)),
        unclamped,
        terminal_noise,
        intermediates,
    })
}

/// Fixed-step Euler integration of `da/dtau = f a + g^2 / (2 sigma_tau) eps(a, o, tau)`
/// from `tau = 1` down to `tau = 0`. The network is queried at the grid index
/// nearest to each continuous `tau`. Returns the unclamped endpoint.
pub fn ode_oracle_sample(
    net: &impl NoisePredictor,
    obs: &Matrix,
    schedule: &NoiseSchedule,
    terminal_noise: &Matrix,
    euler_steps: usize,
) -> Result<Matrix> {
    check_batch(obs, Some(terminal_noise), net.act_dim())?;
    check_steps(net, schedule)?;
    if euler_steps == 0 {
        return Err(Error::contract("euler_steps must be positive"));
    }
    let dt = 1.0 / euler_steps as f64;
    let mut a = terminal_noise.clone();
    for k in 0..euler_steps {
        let tau = 1.0 - k as f64 * dt;
        let (f, g2) = schedule.drift_diffusion(tau)?;
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let av = g.constant(a.clone());
        let ov = g.constant(obs.clone());
        let eps = net.predict_noise(&mut g, &p, av, ov, &[schedule.nearest_index(tau)], Mode::Eval)?;
        let coef = g2 / (2.0 * schedule.sigma_at(tau));
        let slope = &a * f + &(g.value(eps) * coef);
        a = &a - &(slope * dt);
    }
    Ok(a)
}

/// Critics used for policy guidance, evaluated with their running statistics.
#[derive(Clone, Copy)]
pub struct GuidanceCritics<'a> {
    pub first: &'a QNetwork,
    pub second: &'a QNetwork,
    pub guidance: Guidance,
}

impl GuidanceCritics<'_> {
    fn predict(&self, obs: &Matrix, act: &Matrix) -> Result<Matrix> {
        let q1 = self.first.predict(obs, act)?;
        Ok(match self.guidance {
            Guidance::First => q1,
            Guidance::MinTwin => {
                let q2 = self.second.predict(obs, act)?;
                ndarray::Zip::from(&q1).and(&q2).map_collect(|&x, &y| x.min(y))
            }
        })
    }

    fn forward(&self, g: &mut Graph, obs: Var, act: Var) -> Result<Var> {
        let p1 = self.first.params().bind(g, false);
        let (q1, _) = self.first.forward(g, &p1, obs, act, Norm::Running)?;
        Ok(match self.guidance {
            Guidance::First => q1,
            Guidance::MinTwin => {
                let p2 = self.second.params().bind(g, false);
                let (q2, _) = self.second.forward(g, &p2, obs, act, Norm::Running)?;
                g.min(q1, q2)
            }
        })
    }
}

/// Q-guidance term and its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct QLoss {
    pub loss: Var,
    /// The normalizer `D` (1 when `eta == 0`).
    pub denominator: f64,
    /// Mean guiding Q over the sampled actions.
    pub mean_q: f64,
}

/// `-(eta / D) mean Q(o, a^{tau_0})` with gradient flowing through every
/// denoising step into `p`; `D` is a constant. With `eta == 0` returns a
/// constant zero and draws nothing from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn q_loss(
    g: &mut Graph,
    net: &impl NoisePredictor,
    p: &BoundParams,
    critics: GuidanceCritics<'_>,
    obs: &Matrix,
    act: &Matrix,
    schedule: &NoiseSchedule,
    eta: f64,
    norm_mode: QNormMode,
    rng: &mut SimRng,
    mut mode: Mode<'_>,
) -> Result<QLoss> {
    check_batch(obs, Some(act), net.act_dim())?;
    if eta == 0.0 {
        return Ok(QLoss {
            loss: g.constant(Matrix::zeros((1, 1))),
            denominator: 1.0,
            mean_q: 0.0,
        });
    }
    let q_data = critics.predict(obs, act)?;
    let denominator = match norm_mode {
        QNormMode::Abs => q_data.mapv(f64::abs).mean().expect("nonempty").max(ABS_NORM_FLOOR),
        QNormMode::Paper => {
            let d = q_data.mean().expect("nonempty");
            if d.abs() < PAPER_NORM_GUARD || !d.is_finite() {
                return Err(Error::Numerical(format!("Q normalizer {d} too close to zero")));
            }
            d
        }
    };
    let noise = g.constant(standard_normal(obs.nrows(), net.act_dim(), rng));
    let o = g.constant(obs.clone());
    let (a0, _) = denoise(g, net, p, o, noise, schedule, mode.reborrow(), false)?;
    let a0 = g.clamp(a0, -1.0, 1.0);
    let q = critics.forward(g, o, a0)?;
    let mean_q = g.mean(q);
    let mean_value = g.scalar(mean_q);
    let loss = g.scale(mean_q, -eta / denominator);
    Ok(QLoss {
        loss,
        denominator,
        mean_q: mean_value,
    })
}

/// Both parts of the policy objective, already summed into `total`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyLoss {
    pub total: Var,
    pub bc: Var,
    pub q: QLoss,
}

/// `bc_loss + q_loss` on the same batch. The score-matching draws come first
/// in `rng`, then the sampler's terminal noise.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss(
    g: &mut Graph,
    net: &impl NoisePredictor,
    p: &BoundParams,
    critics: GuidanceCritics<'_>,
    obs: &Matrix,
    act: &Matrix,
    schedule: &NoiseSchedule,
    eta: f64,
    norm_mode: QNormMode,
    rng: &mut SimRng,
    mut mode: Mode<'_>,
) -> Result<PolicyLoss> {
    let bc = bc_loss(g, net, p, obs, act, schedule, rng, mode.reborrow())?;
    let q = q_loss(g, net, p, critics, obs, act, schedule, eta, norm_mode, rng, mode)?;
    let total = if eta == 0.0 { bc } else { g.add(bc, q.loss) };
    Ok(PolicyLoss { total, bc, q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximators::{grad_check, QConfig, ScoreConfig};
    use rand::SeedableRng;

    /// Predicts the exact noise that produced `a_noisy` from a known clean action.
    struct Oracle {
        clean: Vec<f64>,
        schedule: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn act_dim(&self) -> usize {
            self.clean.len()
        }
        fn steps(&self) -> usize {
            self.schedule.steps()
        }
        fn bind(&self, _: &mut Graph, _: bool) -> BoundParams {
            BoundParams::default()
        }
        fn predict_noise(
            &self,
            g: &mut Graph,
            _: &BoundParams,
            a_noisy: Var,
            _: Var,
            steps: &[usize],
            _: Mode<'_>,
        ) -> Result<Var> {
            let a = g.value(a_noisy).clone();
            let out = Matrix::from_shape_fn(a.dim(), |(r, c)| {
                let i = if steps.len() == 1 { steps[0] } else { steps[r] };
                (a[[r, c]] - self.schedule.alpha()[i] * self.clean[c]) / self.schedule.sigma()[i]
            });
            Ok(g.constant(out))
        }
    }

    fn tiny_score(n: usize, seed: u64, output_scale: f64) -> ScoreNetwork {
        let mut rng = SimRng::seed_from_u64(seed);
        let cfg = ScoreConfig {
            hidden: 8,
            blocks: 1,
            dropout: 0.0,
            ..ScoreConfig::new(3, 2, n)
        };
        let mut net = ScoreNetwork::new(cfg, &mut rng).unwrap();
        let w = 2 + 4 * cfg.blocks;
        for (k, v) in net.params_mut().tensor_mut(w).iter_mut().enumerate() {
            *v = output_scale * ((k as f64 * 1.7).sin());
        }
        net
    }

    fn constant_q(c: f64) -> QNetwork {
        let mut rng = SimRng::seed_from_u64(0);
        let mut q = QNetwork::new(
            QConfig {
                obs_dim: 3,
                act_dim: 2,
                hidden: 4,
            },
            &mut rng,
        )
        .unwrap();
        q.zero_output_layer();
        q.params_mut().tensor_mut(7)[0] = c;
        q
    }

    fn toy_batch(rows: usize) -> (Matrix, Matrix) {
        let obs = Matrix::from_shape_fn((rows, 3), |(r, c)| ((r * 3 + c) as f64 * 0.41).sin());
        let act = Matrix::from_shape_fn((rows, 2), |(r, c)| ((r * 2 + c) as f64 * 0.77).cos() * 0.9);
        (obs, act)
    }

    #[test]
    fn bc_loss_is_zero_for_exact_noise_predictor() {
        let schedule = NoiseSchedule::with_defaults(5).unwrap();
        let oracle = Oracle {
            clean: vec![0.3, -0.6],
            schedule: schedule.clone(),
        };
        let obs = Matrix::zeros((16, 3));
        let act = Matrix::from_shape_fn((16, 2), |(_, c)| oracle.clean[c]);
        let mut g = Graph::new();
        let mut rng = SimRng::seed_from_u64(9);
        let p = oracle.bind(&mut g, false);
        let loss = bc_loss(&mut g, &oracle, &p, &obs, &act, &schedule, &mut rng, Mode::Eval).unwrap();
        assert!(g.scalar(loss).abs() < 1e-20);
    }

    #[test]
    fn bc_loss_of_zero_network_is_noise_second_moment() {
        let schedule = NoiseSchedule::with_defaults(5).unwrap();
        let mut net = tiny_score(5, 1, 0.5);
        net.zero_output_layer();
        let rows = 4096;
        let (obs, _) = toy_batch(rows);
        let act = Matrix::from_elem((rows, 2), 0.2);
        let mut g = Graph::new();
        let mut rng = SimRng::seed_from_u64(10);
        let p = net.params().bind(&mut g, false);
        let loss = bc_loss(&mut g, &net, &p, &obs, &act, &schedule, &mut rng, Mode::Eval).unwrap();
        let tol = 2.0 * 2.0 / (rows as f64).sqrt();
        assert!((g.scalar(loss) - 2.0).abs() < tol, "{}", g.scalar(loss));
    }

    #[test]
    fn bc_loss_regression_value() {
        let schedule = NoiseSchedule::with_defaults(5).unwrap();
        let net = tiny_score(5, 2, 0.5);
        let (obs, act) = toy_batch(4);
        let mut g = Graph::new();
        let mut rng = SimRng::seed_from_u64(11);
        let p = net.params().bind(&mut g, false);
        let loss = bc_loss(&mut g, &net, &p, &obs, &act, &schedule, &mut rng, Mode::Eval).unwrap();
        assert!((g.scalar(loss) - BC_REGRESSION).abs() < 1e-12);
    }

    const BC_REGRESSION: f64 = 2.143_483_026_851_853;

    #[test]
    fn bc_loss_rejects_empty_batch() {
        let schedule = NoiseSchedule::with_defaults(5).unwrap();
        let net = tiny_score(5, 2, 0.5);
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, false);
        let mut rng = SimRng::seed_from_u64(0);
        let r = bc_loss(
            &mut g,
            &net,
            &p,
            &Matrix::zeros((0, 3)),
            &Matrix::zeros((0, 2)),
            &schedule,
            &mut rng,
            Mode::Eval,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_network_telescopes_exactly() {
        for n in 1..=20 {
            let schedule = NoiseSchedule::with_defaults(n).unwrap();
            let mut net = tiny_score(n, 3, 0.5);
            net.zero_output_layer();
            let obs = Matrix::from_elem((3, 3), 0.1);
            let noise = Matrix::from_shape_fn((3, 2), |(r, c)| r as f64 - c as f64 * 0.5 + 0.25);
            let s = sample_from_noise(&net, &obs, &schedule, noise.clone(), true).unwrap();
            let mut expect = noise.clone();
            for i in (1..=n).rev() {
                expect *= schedule.alpha()[i - 1] / schedule.alpha()[i];
            }
            assert_eq!(s.unclamped, expect, "N={n}");
            let ratio = schedule.alpha()[0] / schedule.alpha()[n];
            for (u, z) in s.unclamped.iter().zip(noise.iter()) {
                assert!((u - ratio * z).abs() <= 1e-12 * ratio * z.abs().max(1.0));
            }
            assert_eq!(s.intermediates.len(), n + 1);
            assert!(s.action.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_step_example() {
        let schedule = NoiseSchedule::with_defaults(1).unwrap();
        let mut net = tiny_score(1, 3, 0.5);
        net.zero_output_layer();
        let noise = Matrix::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let s = sample_from_noise(&net, &Matrix::zeros((1, 3)), &schedule, noise, false).unwrap();
        assert_eq!(s.unclamped[[0, 0]], schedule.alpha()[0] / schedule.alpha()[1]);
        assert_eq!(s.unclamped[[0, 1]], 0.0);
        assert_eq!(s.action[[0, 0]], 1.0);
    }

    #[test]
    fn exact_predictor_recovers_clean_action() {
        let schedule = NoiseSchedule::with_defaults(7).unwrap();
        let oracle = Oracle {
            clean: vec![0.4, -0.8],
            schedule: schedule.clone(),
        };
        let mut rng = SimRng::seed_from_u64(4);
        let s = sample_action(&oracle, &Matrix::zeros((5, 3)), &schedule, &mut rng).unwrap();
        for r in 0..5 {
            let z = &s.terminal_noise;
            for c in 0..2 {
                // The first step reads the terminal draw as a noised clean action.
                let n = schedule.steps();
                let eps = (z[[r, c]] - schedule.alpha()[n] * oracle.clean[c]) / schedule.sigma()[n];
                let expect = schedule.alpha()[0] * oracle.clean[c] + schedule.sigma()[0] * eps;
                assert!((s.unclamped[[r, c]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_given_noise() {
        let schedule = NoiseSchedule::with_defaults(5).unwrap();
        let net = tiny_score(5, 5, 0.8);
        let (obs, noise) = toy_batch(6);
        let a = sample_from_noise(&net, &obs, &schedule, noise.clone(), false).unwrap();
        let b = sample_from_noise(&net, &obs, &schedule, noise, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn euler_oracle_matches_closed_form_for_zero_network() {
        let schedule = NoiseSchedule::with_defaults(5).unwrap();
        let mut net = tiny_score(5, 6, 0.5);
        net.zero_output_layer();
        let obs = Matrix::zeros((1, 3));
        let noise = Matrix::from_shape_vec((1, 2), vec![0.7, -1.3]).unwrap();
        let exact = &noise * (schedule.log_alpha(0.0) - schedule.log_alpha(1.0)).exp();
        let err = |k| {
            let a = ode_oracle_sample(&net, &obs, &schedule, &noise, k).unwrap();
            let d = &a - &exact;
            (d.mapv(|v| v * v).sum() / exact.mapv(|v| v * v).sum()).sqrt()
        };
        let (e2500, e5000) = (err(2500), err(5000));
        assert!(e5000 < 1e-3, "{e5000}");
        let ratio = e2500 / e5000;
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
        let grid = schedule.alpha()[0] / schedule.alpha()[5];
        assert!((exact[[0, 0]] - grid * 0.7).abs() < 1e-12);
    }

    #[test]
    fn solver_agrees_with_ode_oracle() {
        let schedule = NoiseSchedule::with_defaults(50).unwrap();
        for seed in 0..3 {
            let net = tiny_score(50, 100 + seed, 1.5);
            let (obs, _) = toy_batch(4);
            let mut rng = SimRng::seed_from_u64(seed);
            let noise = standard_normal(4, 2, &mut rng);
            let s = sample_from_noise(&net, &obs, &schedule, noise.clone(), false).unwrap();
            let ode = ode_oracle_sample(&net, &obs, &schedule, &noise, 5000).unwrap();
            let d = &s.unclamped - &ode;
            let rel = (d.mapv(|v| v * v).sum() / ode.mapv(|v| v * v).sum()).sqrt();
            assert!(rel < 2e-2, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn constant_critic_gives_minus_eta() {
        let schedule = NoiseSchedule::with_defaults(3).unwrap();
        let net = tiny_score(3, 7, 0.5);
        let q = constant_q(2.5);
        let critics = GuidanceCritics {
            first: &q,
            second: &q,
            guidance: Guidance::First,
        };
        let (obs, act) = toy_batch(5);
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, true);
        let mut rng = SimRng::seed_from_u64(1);
        let out = q_loss(
            &mut g,
            &net,
            &p,
            critics,
            &obs,
            &act,
            &schedule,
            7.0,
            QNormMode::Paper,
            &mut rng,
            Mode::Eval,
        )
        .unwrap();
        assert_eq!(g.scalar(out.loss), -7.0);
    }

    #[test]
    fn policy_loss_with_exact_predictor_and_constant_critic() {
        let schedule = NoiseSchedule::with_defaults(4).unwrap();
        let oracle = Oracle {
            clean: vec![0.1, 0.2],
            schedule: schedule.clone(),
        };
        let q = constant_q(3.0);
        let critics = GuidanceCritics {
            first: &q,
            second: &q,
            guidance: Guidance::MinTwin,
        };
        let obs = Matrix::zeros((8, 3));
        let act = Matrix::from_shape_fn((8, 2), |(_, c)| oracle.clean[c]);
        let mut g = Graph::new();
        let mut rng = SimRng::seed_from_u64(2);
        let out = policy_loss(
            &mut g,
            &oracle,
            &BoundParams::default(),
            critics,
            &obs,
            &act,
            &schedule,
            4.0,
            QNormMode::Paper,
            &mut rng,
            Mode::Eval,
        )
        .unwrap();
        assert!((g.scalar(out.total) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_eta_reduces_to_behavior_cloning() {
        let schedule = NoiseSchedule::with_defaults(3).unwrap();
        let net = tiny_score(3, 8, 0.5);
        let q = constant_q(1.0);
        let critics = GuidanceCritics {
            first: &q,
            second: &q,
            guidance: Guidance::First,
        };
        let (obs, act) = toy_batch(6);
        let run = |eta_path: bool| {
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, true);
            let mut rng = SimRng::seed_from_u64(3);
            let v = if eta_path {
                let out = policy_loss(
                    &mut g,
                    &net,
                    &p,
                    critics,
                    &obs,
                    &act,
                    &schedule,
                    0.0,
                    QNormMode::Abs,
                    &mut rng,
                    Mode::Eval,
                )
                .unwrap();
                assert_eq!(g.scalar(out.q.loss), 0.0);
                out.total
            } else {
                bc_loss(&mut g, &net, &p, &obs, &act, &schedule, &mut rng, Mode::Eval).unwrap()
            };
            let grads = g.backward(v);
            (g.scalar(v), net.params().flat_grad(&grads, &p))
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn paper_mode_rejects_vanishing_normalizer() {
        let schedule = NoiseSchedule::with_defaults(3).unwrap();
        let net = tiny_score(3, 8, 0.5);
        let q = constant_q(0.0);
        let critics = GuidanceCritics {
            first: &q,
            second: &q,
            guidance: Guidance::First,
        };
        let (obs, act) = toy_batch(2);
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, true);
        let mut rng = SimRng::seed_from_u64(3);
        let r = q_loss(
            &mut g,
            &net,
            &p,
            critics,
            &obs,
            &act,
            &schedule,
            1.0,
            QNormMode::Paper,
            &mut rng,
            Mode::Eval,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
        let r = q_loss(
            &mut g,
            &net,
            &p,
            critics,
            &obs,
            &act,
            &schedule,
            1.0,
            QNormMode::Abs,
            &mut rng,
            Mode::Eval,
        );
        assert!(r.is_ok());
    }

    /// N=3 with a small beta_max, so sampled actions stay inside the clamp and
    /// the Q term carries gradient.
    fn gentle_schedule() -> NoiseSchedule {
        NoiseSchedule::new(3, 0.1, 2.0).unwrap()
    }

    fn random_q(seed: u64) -> QNetwork {
        let mut rng = SimRng::seed_from_u64(seed);
        let mut q = QNetwork::new(
            QConfig {
                obs_dim: 3,
                act_dim: 2,
                hidden: 6,
            },
            &mut rng,
        )
        .unwrap();
        for (k, v) in q.params_mut().tensor_mut(6).iter_mut().enumerate() {
            *v = (k as f64 * 0.9).cos();
        }
        q
    }

    #[test]
    fn policy_loss_gradient_through_chain() {
        let schedule = gentle_schedule();
        let net = tiny_score(3, 12, 0.7);
        let q = random_q(13);
        let critics = GuidanceCritics {
            first: &q,
            second: &q,
            guidance: Guidance::First,
        };
        // Actions well inside the cube keep the sampled chain away from the clamp kinks.
        let (obs, act) = toy_batch(3);
        let act = act * 0.3;
        let value = |params: &[f64], want_grad: bool| {
            let mut net = net.clone();
            net.params_mut().as_mut_slice().copy_from_slice(params);
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, want_grad);
            let mut rng = SimRng::seed_from_u64(21);
            let out = policy_loss(
                &mut g,
                &net,
                &p,
                critics,
                &obs,
                &act,
                &schedule,
                2.0,
                QNormMode::Abs,
                &mut rng,
                Mode::Eval,
            )
            .unwrap();
            let grad = if want_grad {
                let grads = g.backward(out.total);
                net.params().flat_grad(&grads, &p)
            } else {
                Vec::new()
            };
            (g.scalar(out.total), grad)
        };
        let base = net.params().as_slice().to_vec();
        let (_, analytic) = value(&base, true);
        let mut rng = SimRng::seed_from_u64(0);
        let report = grad_check(&base, &analytic, |p| value(p, false).0, 200, 1e-4, &mut rng);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn q_loss_gradient_through_chain() {
        let schedule = gentle_schedule();
        let net = tiny_score(3, 14, 0.7);
        let q = random_q(15);
        let critics = GuidanceCritics {
            first: &q,
            second: &q,
            guidance: Guidance::First,
        };
        let (obs, act) = toy_batch(3);
        let value = |params: &[f64], want_grad: bool| {
            let mut net = net.clone();
            net.params_mut().as_mut_slice().copy_from_slice(params);
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, want_grad);
            let mut rng = SimRng::seed_from_u64(22);
            let out = q_loss(
                &mut g,
                &net,
                &p,
                critics,
                &obs,
                &act,
                &schedule,
                1.0,
                QNormMode::Abs,
                &mut rng,
                Mode::Eval,
            )
            .unwrap();
            let grad = if want_grad {
                let grads = g.backward(out.loss);
                net.params().flat_grad(&grads, &p)
            } else {
                Vec::new()
            };
            (g.scalar(out.loss), grad)
        };
        let base = net.params().as_slice().to_vec();
        let (_, analytic) = value(&base, true);
        assert!(analytic.iter().any(|v| v.abs() > 1e-8));
        let mut rng = SimRng::seed_from_u64(0);
        let report = grad_check(&base, &analytic, |p| value(p, false).0, 200, 1e-4, &mut rng);
        assert!(report.passed, "{report:?}");
    }
}
