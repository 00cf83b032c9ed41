//! Exponential change-of-measure weights along zero-drift paths.
//!
//! For a drift candidate `b` and the driftless diffusion `X^0` with
//! martingale increments `dM = sigma dB`, the weight is
//!
//! ```text
//! U^b_t = exp( sum_k <b, dM_k>_g  -  1/2 sum_k |b|_g^2 dt )
//! ```
//!
//! with all integrands evaluated at the left node, which is what makes the
//! discrete sum a martingale and keeps the weights unbiased at every step
//! count. Weights are never clipped: extreme values are reported by the
//! moment checks rather than truncated, since truncation would bias the
//! very bounds under test.

use crate::diffusion::{DiffusionSpec, DriftField, PathEnsemble};
use crate::error::{Error, Result};
use crate::linalg;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// A zero-drift ensemble together with per-node Girsanov exponents and
/// weights for one drift candidate.
#[derive(Clone, Debug)]
pub struct WeightedEnsemble {
    ensemble: Arc<PathEnsemble>,
    /// `[path][node]` running exponent, zero at the start node
    exponents: Vec<f64>,
    /// `exp(exponent)`, same layout
    weights: Vec<f64>,
    drift_sup: f64,
    xi: f64,
}

impl WeightedEnsemble {
    pub fn ensemble(&self) -> &PathEnsemble {
        &self.ensemble
    }

    pub fn drift_sup(&self) -> f64 {
        self.drift_sup
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn exponent(&self, path: usize, node: usize) -> f64 {
        self.exponents[path * self.ensemble.times().len() + node]
    }

    pub fn weight(&self, path: usize, node: usize) -> f64 {
        self.weights[path * self.ensemble.times().len() + node]
    }
}

/// Report row for one `(t, p)` moment check.
#[derive(Clone, Debug, Serialize)]
pub struct MomentRecord {
    pub time: f64,
    pub p: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
    /// set when the relative standard error exceeds 50%
    pub heavy_tail: bool,
}

/// Compute per-path, per-node exponents and weights of the ensemble under
/// the drift `b`. The ensemble must have been simulated with zero drift
/// and the drift's horizon must cover the ensemble's.
pub fn compute_weights(
    ensemble: Arc<PathEnsemble>,
    drift: &DriftField,
    spec: &DiffusionSpec,
) -> Result<WeightedEnsemble> {
    if !ensemble.zero_drift() {
        return Err(Error::NotZeroDrift);
    }
    let d = ensemble.dim();
    if drift.dim() != d || spec.dim() != d {
        return Err(Error::GridMismatch("dimension mismatch".into()));
    }
    let slack = 1e-12 * (1.0 + ensemble.horizon());
    if drift.horizon() + slack < ensemble.horizon() {
        return Err(Error::GridMismatch(format!(
            "drift horizon {} does not cover ensemble horizon {}",
            drift.horizon(),
            ensemble.horizon()
        )));
    }

    let n_nodes = ensemble.times().len();
    let n_paths = ensemble.n_paths();
    let dt = ensemble.dt();
    let times = ensemble.times().to_vec();

    let mut exponents = vec![0.0; n_paths * n_nodes];
    let ens = ensemble.clone();
    let results: Vec<Option<Error>> = exponents
        .par_chunks_mut(n_nodes)
        .enumerate()
        .map(|(path, expo)| {
            let mut b_val = vec![0.0; d];
            let mut g = vec![0.0; d * d];
            let mut ginv = vec![0.0; d * d];
            let mut scratch = vec![0.0; d * d];
            let mut acc = 0.0;
            expo[0] = 0.0;
            for k in 0..n_nodes - 1 {
                let t_k = times[k];
                let x_k = ens.position(path, k);
                if let Err(e) = drift.eval_into(t_k, x_k, &mut b_val) {
                    return Some(e);
                }
                spec.metric_into(t_k, x_k, &mut g);
                if !linalg::invert(&g, &mut ginv, &mut scratch) {
                    return Some(Error::InvalidSpec(format!(
                        "metric not invertible at t={t_k}"
                    )));
                }
                let dm = ens.martingale_increment(path, k);
                let ito = linalg::quad_form(&ginv, &b_val, dm);
                let b2 = linalg::quad_form(&ginv, &b_val, &b_val);
                acc += ito - 0.5 * b2 * dt;
                expo[k + 1] = acc;
            }
            None
        })
        .collect();
    if let Some(e) = results.into_iter().flatten().next() {
        return Err(e);
    }

    let weights: Vec<f64> = exponents.iter().map(|n| n.exp()).collect();
    Ok(WeightedEnsemble {
        ensemble,
        exponents,
        weights,
        drift_sup: drift.sup_norm(),
        xi: spec.xi(),
    })
}

/// Monte Carlo check of the exponential moment bound
/// `E[(U^b_s)^p] <= exp(xi p (p-1) |b|_inf^2 s / 2)` at the requested
/// node times. Passing means `estimate <= bound + 3 stderr`.
pub fn moment_check(w: &WeightedEnsemble, p: f64, times: &[f64]) -> Result<Vec<MomentRecord>> {
    if !(p > 1.0) {
        return Err(Error::InvalidParameter {
            name: "p",
            value: p,
            constraint: "p > 1",
        });
    }
    let mut records = Vec::with_capacity(times.len());
    let n = w.ensemble.n_paths();
    for &t in times {
        let node = w.ensemble.node_of_time(t)?;
        let vals: Vec<f64> = (0..n).map(|path| w.weight(path, node).powf(p)).collect();
        let (estimate, stderr) = crate::stats::mean_se(&vals);
        let bound = (w.xi * p * (p - 1.0) / 2.0 * w.drift_sup * w.drift_sup * t).exp();
        records.push(MomentRecord {
            time: t,
            p,
            estimate,
            stderr,
            bound,
            pass: estimate <= bound + 3.0 * stderr,
            heavy_tail: stderr > 0.5 * estimate.abs(),
        });
    }
    Ok(records)
}

/// Reweighted expectation `E[U^b_t f(X^0_t)]`, an estimator of
/// `E[f(X^b_t)]`; returns the value and its standard error.
pub fn reweighted_expectation(
    w: &WeightedEnsemble,
    f: impl Fn(&[f64]) -> f64 + Sync,
    t: f64,
) -> Result<(f64, f64)> {
    let node = w.ensemble.node_of_time(t)?;
    let n = w.ensemble.n_paths();
    let vals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|path| w.weight(path, node) * f(w.ensemble.position(path, node)))
        .collect();
    Ok(crate::stats::mean_se(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::simulate_paths;
    use approx::assert_relative_eq;

    fn ensemble(spec: &DiffusionSpec, n: usize, seed: u64) -> Arc<PathEnsemble> {
        Arc::new(simulate_paths(spec, None, &[vec![0.0, 0.0]], 0.25, 25, n, seed).unwrap())
    }

    #[test]
    fn zero_drift_weights_are_one() {
        let spec = DiffusionSpec::identity(2);
        let ens = ensemble(&spec, 100, 3);
        let b = DriftField::zero(2, 0.25);
        let w = compute_weights(ens, &b, &spec).unwrap();
        for path in 0..100 {
            for node in 0..=25 {
                assert_eq!(w.weight(path, node), 1.0);
            }
        }
    }

    #[test]
    fn weight_starts_at_one() {
        let spec = DiffusionSpec::diag_sin(2, 0.5).unwrap();
        let ens = ensemble(&spec, 50, 4);
        let b = DriftField::constant(vec![1.0, -0.5], 0.25, 1.0).unwrap();
        let w = compute_weights(ens, &b, &spec).unwrap();
        for path in 0..50 {
            assert_eq!(w.weight(path, 0), 1.0);
            assert!(w.weight(path, 10) > 0.0);
        }
    }

    #[test]
    fn exponent_recomputable_from_ensemble() {
        let spec = DiffusionSpec::diag_sin(2, 0.5).unwrap();
        let ens = ensemble(&spec, 20, 9);
        let b = DriftField::constant(vec![0.7, 0.3], 0.25, 1.0).unwrap();
        let w = compute_weights(ens.clone(), &b, &spec).unwrap();
        // recompute the running sum independently for one path
        let path = 7;
        let dt = ens.dt();
        let mut acc = 0.0;
        for k in 0..ens.steps() {
            let x = ens.position(path, k);
            let t = ens.times()[k];
            let bv = b.eval(t, x).unwrap();
            let ito = spec.g_inner(t, x, &bv, ens.martingale_increment(path, k)).unwrap();
            let b2 = spec.g_inner(t, x, &bv, &bv).unwrap();
            acc += ito - 0.5 * b2 * dt;
            assert_relative_eq!(w.exponent(path, k + 1), acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_mean_constant_drift() {
        let spec = DiffusionSpec::identity(2);
        let n = 100_000;
        let ens = ensemble(&spec, n, 11);
        let b = DriftField::constant(vec![1.0, 0.0], 0.25, 1.0).unwrap();
        let w = compute_weights(ens, &b, &spec).unwrap();
        let (m, se) = reweighted_expectation(&w, |_| 1.0, 0.25).unwrap();
        assert!((m - 1.0).abs() < 4.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn reweighted_mean_shift() {
        // E[U f(X^0)] with f = x1 equals the drifted mean x1 + v1 t
        let spec = DiffusionSpec::identity(2);
        let n = 100_000;
        let ens = ensemble(&spec, n, 13);
        let b = DriftField::constant(vec![1.0, -0.5], 0.25, 1.0).unwrap();
        let w = compute_weights(ens, &b, &spec).unwrap();
        let (m, se) = reweighted_expectation(&w, |x| x[0], 0.25).unwrap();
        assert!((m - 0.25).abs() < 4.0 * se, "mean {m}, se {se}");
        let (m2, se2) = reweighted_expectation(&w, |x| x[1], 0.25).unwrap();
        assert!((m2 + 0.125).abs() < 4.0 * se2, "mean {m2}, se {se2}");
    }

    #[test]
    fn reweighted_box_probability() {
        // indicator of a box under the shifted Gaussian law
        let spec = DiffusionSpec::identity(2);
        let n = 100_000;
        let t = 0.25;
        let ens = ensemble(&spec, n, 17);
        let v = vec![1.0, 0.5];
        let b = DriftField::constant(v.clone(), t, 1.0).unwrap();
        let w = compute_weights(ens, &b, &spec).unwrap();
        let lo = [0.0, -0.2];
        let hi = [0.6, 0.4];
        let (m, se) = reweighted_expectation(
            &w,
            |x| {
                if x[0] >= lo[0] && x[0] <= hi[0] && x[1] >= lo[1] && x[1] <= hi[1] {
                    1.0
                } else {
                    0.0
                }
            },
            t,
        )
        .unwrap();
        let mean = [v[0] * t, v[1] * t];
        let exact = crate::stats::gaussian_box_mass(&mean, t, &lo, &hi);
        assert!((m - exact).abs() < 4.0 * se, "got {m}, exact {exact}, se {se}");
    }

    #[test]
    fn moment_check_closed_forms() {
        let spec = DiffusionSpec::identity(2);
        let n = 100_000;
        let ens = ensemble(&spec, n, 19);

        // |v| = 1: E[U^2_s] = e^{s}, bound e^{s} -> near-equality pass
        let b = DriftField::constant(vec![1.0, 0.0], 0.25, 1.0).unwrap();
        let w = compute_weights(ens.clone(), &b, &spec).unwrap();
        let rec = &moment_check(&w, 2.0, &[0.25]).unwrap()[0];
        assert_relative_eq!(rec.bound, 0.25f64.exp(), epsilon = 1e-12);
        assert!((rec.estimate - 0.25f64.exp()).abs() < 4.0 * rec.stderr);
        assert!(rec.pass);

        // |v| = 2: bound e^{1}, analytic value e^{1}
        let b2 = DriftField::constant(vec![2.0, 0.0], 0.25, 1.0).unwrap();
        let w2 = compute_weights(ens, &b2, &spec).unwrap();
        let rec2 = &moment_check(&w2, 2.0, &[0.25]).unwrap()[0];
        assert_relative_eq!(rec2.bound, 1.0f64.exp(), epsilon = 1e-12);
        assert!((rec2.estimate - 1.0f64.exp()).abs() < 4.0 * rec2.stderr);
        assert!(rec2.pass);
    }

    #[test]
    fn moment_check_zero_drift_trivial() {
        let spec = DiffusionSpec::identity(2);
        let ens = ensemble(&spec, 1000, 23);
        let b = DriftField::zero(2, 0.25);
        let w = compute_weights(ens, &b, &spec).unwrap();
        for rec in moment_check(&w, 3.0, &[0.1, 0.25]).unwrap() {
            assert_eq!(rec.estimate, 1.0);
            assert_eq!(rec.bound, 1.0);
            assert!(rec.pass);
            assert!(!rec.heavy_tail);
        }
    }

    #[test]
    fn moment_check_requires_p_above_one() {
        let spec = DiffusionSpec::identity(2);
        let ens = ensemble(&spec, 10, 31);
        let b = DriftField::zero(2, 0.25);
        let w = compute_weights(ens, &b, &spec).unwrap();
        assert!(moment_check(&w, 1.0, &[0.1]).is_err());
        assert!(moment_check(&w, 0.5, &[0.1]).is_err());
    }

    #[test]
    fn drifted_ensemble_rejected() {
        let spec = DiffusionSpec::identity(2);
        let b = DriftField::constant(vec![1.0, 0.0], 0.25, 1.0).unwrap();
        let ens = Arc::new(
            simulate_paths(&spec, Some(&b), &[vec![0.0, 0.0]], 0.25, 8, 4, 1).unwrap(),
        );
        assert!(matches!(
            compute_weights(ens, &b, &spec),
            Err(Error::NotZeroDrift)
        ));
    }

    #[test]
    fn short_drift_horizon_rejected() {
        let spec = DiffusionSpec::identity(2);
        let ens = ensemble(&spec, 10, 29);
        let b = DriftField::constant(vec![1.0, 0.0], 0.1, 1.0).unwrap();
        assert!(matches!(
            compute_weights(ens, &b, &spec),
            Err(Error::GridMismatch(_))
        ));
    }
}
