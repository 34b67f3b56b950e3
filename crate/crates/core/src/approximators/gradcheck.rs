use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::SimRng;

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-5;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a floor so that vanishing gradients do not amplify
/// finite-difference round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares an analytic gradient against central differences of `loss` on up
/// to `probes` randomly chosen coordinates.
///
/// `loss` must be a pure function of the parameter vector (evaluation mode,
/// fixed random draws).
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    probes: usize,
    tolerance: f64,
    rng: &mut SimRng,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let indices: Vec<usize> = if probes >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(rng, params.len(), probes).into_vec()
    };
    let mut work = params.to_vec();
    let mut worst = (0.0, 0);
    for &i in &indices {
        let orig = work[i];
        work[i] = orig + DEFAULT_STEP;
        let up = loss(&work);
        work[i] = orig - DEFAULT_STEP;
        let down = loss(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * DEFAULT_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    GradCheckReport {
        checked: indices.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_net_quadratic_probe_is_exact() {
        // y = W x, L(W) = 0.5 * ||y - t||^2 with W of shape 8 x 10.
        let x: Vec<f64> = (0..10).map(|i| 1.0 + 0.5 * (i as f64 * 0.7).cos()).collect();
        let t: Vec<f64> = (0..8).map(|i| -3.0 - 0.5 * i as f64).collect();
        let w: Vec<f64> = (0..80).map(|i| 0.2 * (i as f64 * 0.37).sin()).collect();
        let residual = |p: &[f64]| -> Vec<f64> {
            (0..8)
                .map(|r| (0..10).map(|c| p[r * 10 + c] * x[c]).sum::<f64>() - t[r])
                .collect()
        };
        let loss = |p: &[f64]| 0.5 * residual(p).iter().map(|e| e * e).sum::<f64>();
        let e = residual(&w);
        let analytic: Vec<f64> = (0..80).map(|i| e[i / 10] * x[i % 10]).collect();
        let mut rng = SimRng::seed_from_u64(0);
        let report = grad_check(&w, &analytic, loss, 50, 1e-9, &mut rng);
        assert_eq!(report.checked, 50);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let w = vec![1.0, 2.0, 3.0];
        let loss = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let analytic = vec![2.0, 4.0, 7.0];
        let mut rng = SimRng::seed_from_u64(0);
        let report = grad_check(&w, &analytic, loss, 50, 1e-4, &mut rng);
        assert!(!report.passed);
        assert_eq!(report.worst_index, 2);
    }
}
