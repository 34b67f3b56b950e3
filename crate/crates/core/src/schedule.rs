//! Variance-preserving noise schedule on a uniform partition of the diffusion
//! horizon `[0, 1]`.
//!
//! The log-signal coefficient is affine in `tau`:
//!
//! ```text
//! h(tau)  = -beta_min/(N+1) - (beta_max - beta_min) * (2 N tau + 1) / (2 (N+1)^2)
//! alpha   = exp(h)          (= 1 - beta)
//! sigma^2 = 1 - alpha^2
//! lambda  = ln(alpha / sigma)
//! ```
//!
//! `alpha` is the per-level signal coefficient itself, not a cumulative
//! product of per-step retention factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;

/// What a checkpoint stores; derived arrays are rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDescriptor {
    pub n: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.n, self.beta_min, self.beta_max)
    }
}

/// Discretized schedule; index `i` runs over `0..=n` with `tau[i] = i / n`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    n: usize,
    beta_min: f64,
    beta_max: f64,
    tau: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(n: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("diffusion step count N must be at least 1"));
        }
        if !(beta_min.is_finite() && beta_max.is_finite()) {
            return Err(Error::config("beta_min and beta_max must be finite"));
        }
        if !(beta_min > 0.0 && beta_min < beta_max) {
            return Err(Error::config(format!(
                "need 0 < beta_min < beta_max, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }

        let mut schedule = NoiseSchedule {
            n,
            beta_min,
            beta_max,
            tau: Vec::with_capacity(n + 1),
            beta: Vec::with_capacity(n + 1),
            alpha: Vec::with_capacity(n + 1),
            sigma: Vec::with_capacity(n + 1),
            lambda: Vec::with_capacity(n + 1),
        };
        for i in 0..=n {
            let tau = i as f64 / n as f64;
            let h = schedule.log_alpha(tau);
            let alpha = h.exp();
            // sigma^2 = 1 - e^{2h}; expm1 keeps precision when alpha is close to 1.
            let sigma_sq = -(2.0 * h).exp_m1();
            let sigma = sigma_sq.sqrt();
            if !(alpha > 0.0 && alpha < 1.0 && sigma > 0.0 && sigma < 1.0) {
                return Err(Error::config(format!(
                    "schedule degenerates at tau={tau}: alpha={alpha}, sigma={sigma}"
                )));
            }
            schedule.tau.push(tau);
            schedule.beta.push(-h.exp_m1());
            schedule.alpha.push(alpha);
            schedule.sigma.push(sigma);
            schedule.lambda.push(h - 0.5 * sigma_sq.ln());
        }
        Ok(schedule)
    }

    pub fn with_defaults(n: usize) -> Result<Self> {
        Self::new(n, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            n: self.n,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `h(tau) = ln alpha_tau`, the smooth extension used between grid points.
    pub fn log_alpha(&self, tau: f64) -> f64 {
        let n = self.n as f64;
        -self.beta_min / (n + 1.0) - (self.beta_max - self.beta_min) * (2.0 * n * tau + 1.0) / (2.0 * (n + 1.0).powi(2))
    }

    pub fn alpha_at(&self, tau: f64) -> f64 {
        self.log_alpha(tau).exp()
    }

    pub fn sigma_at(&self, tau: f64) -> f64 {
        (-(2.0 * self.log_alpha(tau)).exp_m1()).sqrt()
    }

    /// Drift `f = d ln(alpha)/d tau` and squared diffusion
    /// `g^2 = d sigma^2/d tau - 2 f sigma^2` of the forward SDE.
    ///
    /// With `sigma^2 = 1 - e^{2h}` the second expression collapses to `-2 h'`,
    /// and `h'` is constant because `h` is affine in `tau`.
    pub fn drift_diffusion(&self, tau: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Domain(format!("tau={tau} outside [0, 1]")));
        }
        let n = self.n as f64;
        let f = -(self.beta_max - self.beta_min) * n / (n + 1.0).powi(2);
        Ok((f, -2.0 * f))
    }

    /// Index of the grid point closest to `tau` (ties round up).
    pub fn nearest_index(&self, tau: f64) -> usize {
        let i = (tau * self.n as f64).round();
        (i.max(0.0) as usize).min(self.n)
    }
}
