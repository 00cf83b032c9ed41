//! Transition-density estimation and bound verification.
//!
//! Histograms are the primary estimator: bin means are unbiased and carry
//! exact binomial standard errors, which is what conservative bound
//! checking needs. Verification routines compare estimated (or exact)
//! densities against the two-sided Aronson envelopes and against the
//! drift perturbation bound
//!
//! ```text
//! p_b(x,t,y) <= p(x,t,y)
//!     + |b|_inf sqrt(t) e^{xi |b|_inf^2 t / (2(q-1))} C/t^{d/2} e^{-|y-x|^2/(C t)}
//! ```
//!
//! and check the representation formula
//!
//! ```text
//! p_b(x,t,y) = p(x,t,y)
//!     + int_0^t E^x[ U^b_s <b(s,X^0_s), grad^g_x p(X^0_s, t-s, y)>_g ] ds
//! ```
//!
//! by left-endpoint quadrature on the simulation grid. The s-integrand has
//! an integrable singularity at `s = t`; the quadrature evaluates the last
//! cell at its left endpoint and reports the analytic envelope bound for
//! that cell separately. Only the window starting at zero is implemented;
//! shifted windows `(s, t)` are an extension point.

use crate::constants::ConstantsBundle;
use crate::diffusion::{simulate_paths, DiffusionSpec, DriftField, PathEnsemble, SpaceGrid};
use crate::error::{Error, Result};
use crate::girsanov::{compute_weights, WeightedEnsemble};
use crate::stats::gaussian_density;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Rectangular histogram grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
}

impl BinGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != bins.len() || lo.is_empty() {
            return Err(Error::InvalidSpec("bin grid axis lists must match".into()));
        }
        for k in 0..lo.len() {
            if !(lo[k] < hi[k]) || bins[k] == 0 {
                return Err(Error::InvalidSpec(format!("bin grid axis {k} degenerate")));
            }
        }
        Ok(Self { lo, hi, bins })
    }

    /// A cube of half-width `half_width` around `center` with `bins` bins
    /// per axis.
    pub fn centered(center: &[f64], half_width: f64, bins: usize) -> Result<Self> {
        Self::new(
            center.iter().map(|c| c - half_width).collect(),
            center.iter().map(|c| c + half_width).collect(),
            vec![bins; center.len()],
        )
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn bin_count(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn bin_volume(&self) -> f64 {
        (0..self.dim())
            .map(|k| (self.hi[k] - self.lo[k]) / self.bins[k] as f64)
            .product()
    }

    /// Flat bin index of `x`, or None outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0usize;
        for k in 0..self.dim() {
            if x[k] < self.lo[k] || x[k] >= self.hi[k] {
                return None;
            }
            let width = (self.hi[k] - self.lo[k]) / self.bins[k] as f64;
            let mut i = ((x[k] - self.lo[k]) / width) as usize;
            if i >= self.bins[k] {
                i = self.bins[k] - 1;
            }
            idx = idx * self.bins[k] + i;
        }
        Some(idx)
    }

    /// Center of the flat bin `idx`.
    pub fn center(&self, idx: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut rem = idx;
        for k in (0..d).rev() {
            let n = self.bins[k];
            let i = rem % n;
            rem /= n;
            let width = (self.hi[k] - self.lo[k]) / n as f64;
            out[k] = self.lo[k] + (i as f64 + 0.5) * width;
        }
        out
    }

    /// Corner bounds of the flat bin `idx`.
    pub fn bin_bounds(&self, idx: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        let mut rem = idx;
        for k in (0..d).rev() {
            let n = self.bins[k];
            let i = rem % n;
            rem /= n;
            let width = (self.hi[k] - self.lo[k]) / n as f64;
            lo[k] = self.lo[k] + i as f64 * width;
            hi[k] = lo[k] + width;
        }
        (lo, hi)
    }

    /// Squared distance from `x` to the closest point of bin `idx`.
    pub fn min_dist2(&self, idx: usize, x: &[f64]) -> f64 {
        let (lo, hi) = self.bin_bounds(idx);
        x.iter()
            .enumerate()
            .map(|(k, &xi)| {
                let c = xi.clamp(lo[k], hi[k]);
                (xi - c) * (xi - c)
            })
            .sum()
    }
}

/// Histogram density estimate at one time from one start point.
#[derive(Clone, Debug, Serialize)]
pub struct DensityEstimate {
    pub time: f64,
    pub grid: BinGrid,
    pub mass: Vec<f64>,
    pub density: Vec<f64>,
    pub se_mass: Vec<f64>,
    pub se_density: Vec<f64>,
    pub total_mass: f64,
    pub out_mass: f64,
    pub n_paths: usize,
    pub start: Vec<f64>,
    /// true when masses are Girsanov-weighted (total plus out-of-box mass
    /// then estimates 1 instead of summing to it exactly)
    pub weighted: bool,
}

/// Bin the ensemble marginal at time `t`. All paths must share one start
/// point; total mass plus out-of-box mass is exactly one.
pub fn estimate_density(ens: &PathEnsemble, t: f64, grid: BinGrid) -> Result<DensityEstimate> {
    if ens.n_starts() != 1 {
        return Err(Error::MultiStart(ens.n_starts()));
    }
    if grid.dim() != ens.dim() {
        return Err(Error::GridMismatch("bin grid dimension mismatch".into()));
    }
    let node = ens.node_of_time(t)?;
    let n = ens.n_paths();
    let n_bins = grid.bin_count();
    let mut counts = vec![0usize; n_bins];
    let mut out_count = 0usize;
    for p in 0..n {
        match grid.locate(ens.position(p, node)) {
            Some(b) => counts[b] += 1,
            None => out_count += 1,
        }
    }
    let vol = grid.bin_volume();
    let nf = n as f64;
    let mass: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
    let se_mass: Vec<f64> = mass.iter().map(|&m| (m * (1.0 - m) / nf).sqrt()).collect();
    let density: Vec<f64> = mass.iter().map(|&m| m / vol).collect();
    let se_density: Vec<f64> = se_mass.iter().map(|&s| s / vol).collect();
    let total_mass = mass.iter().sum();
    Ok(DensityEstimate {
        time: t,
        grid,
        mass,
        density,
        se_mass,
        se_density,
        total_mass,
        out_mass: out_count as f64 / nf,
        n_paths: n,
        start: ens.start(0).to_vec(),
        weighted: false,
    })
}

/// Girsanov-weighted histogram: estimates the marginal of the drifted
/// process from zero-drift paths.
pub fn estimate_weighted_density(
    w: &WeightedEnsemble,
    t: f64,
    grid: BinGrid,
) -> Result<DensityEstimate> {
    let ens = w.ensemble();
    if ens.n_starts() != 1 {
        return Err(Error::MultiStart(ens.n_starts()));
    }
    let node = ens.node_of_time(t)?;
    let n = ens.n_paths();
    let n_bins = grid.bin_count();
    let mut sum = vec![0.0f64; n_bins];
    let mut sq = vec![0.0f64; n_bins];
    let mut out_sum = 0.0;
    for p in 0..n {
        let u = w.weight(p, node);
        match grid.locate(ens.position(p, node)) {
            Some(b) => {
                sum[b] += u;
                sq[b] += u * u;
            }
            None => out_sum += u,
        }
    }
    let vol = grid.bin_volume();
    let nf = n as f64;
    let mass: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se_mass: Vec<f64> = sum
        .iter()
        .zip(&sq)
        .map(|(&s, &qq)| {
            let mean = s / nf;
            let var = (qq / nf - mean * mean).max(0.0);
            (var / nf).sqrt()
        })
        .collect();
    let density: Vec<f64> = mass.iter().map(|&m| m / vol).collect();
    let se_density: Vec<f64> = se_mass.iter().map(|&s| s / vol).collect();
    let total_mass = mass.iter().sum();
    Ok(DensityEstimate {
        time: t,
        grid,
        mass,
        density,
        se_mass,
        se_density,
        total_mass,
        out_mass: out_sum / nf,
        n_paths: n,
        start: ens.start(0).to_vec(),
        weighted: true,
    })
}

/// One bin of an envelope check.
#[derive(Clone, Debug, Serialize)]
pub struct BinCheck {
    pub bin: usize,
    pub center: Vec<f64>,
    pub estimate: f64,
    pub stderr: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AronsonReport {
    pub time: f64,
    pub kappa: f64,
    pub kappa_prime: f64,
    pub bins_checked: usize,
    pub lower_bins_checked: usize,
    pub violations: Vec<BinCheck>,
    pub pass: bool,
}

/// Two-sided envelope check with Monte Carlo allowance.
///
/// The upper bound is checked on every bin (`estimate - 3 se <= upper`).
/// The lower bound only binds where the histogram can resolve it: bins
/// with observed mass, optionally restricted to `|center - start| <=
/// lower_radius` for central-mass-region checks.
pub fn verify_aronson(
    est: &DensityEstimate,
    kappa: f64,
    kappa_prime: f64,
    lower_radius: Option<f64>,
) -> Result<AronsonReport> {
    if !(kappa > kappa_prime && kappa_prime > 0.0) {
        return Err(Error::InvalidParameter {
            name: "kappa_prime",
            value: kappa_prime,
            constraint: "0 < kappa' < kappa",
        });
    }
    let t = est.time;
    let mut violations = Vec::new();
    let mut lower_checked = 0usize;
    for bin in 0..est.grid.bin_count() {
        let center = est.grid.center(bin);
        let (lo, up) =
            crate::constants::aronson_envelope(kappa, Some(kappa_prime), t, &est.start, &center)?;
        let lo = lo.unwrap();
        let p = est.density[bin];
        let se = est.se_density[bin];
        let upper_ok = p - 3.0 * se <= up;
        let in_lower_region = est.mass[bin] > 0.0
            && lower_radius
                .map(|r| crate::linalg::dist(&center, &est.start) <= r)
                .unwrap_or(true);
        let lower_ok = !in_lower_region || p + 3.0 * se >= lo;
        if in_lower_region {
            lower_checked += 1;
        }
        if !(upper_ok && lower_ok) {
            violations.push(BinCheck {
                bin,
                center,
                estimate: p,
                stderr: se,
                lower: lo,
                upper: up,
                pass: false,
            });
        }
    }
    Ok(AronsonReport {
        time: t,
        kappa,
        kappa_prime,
        bins_checked: est.grid.bin_count(),
        lower_bins_checked: lower_checked,
        pass: violations.is_empty(),
        violations,
    })
}

/// The additive correction of the drift perturbation bound at squared
/// displacement `r2 = |y - x|^2`; nonnegative by construction.
pub fn perturbation_correction(bundle: &ConstantsBundle, b_norm: f64, t: f64, r2: f64) -> f64 {
    let d = bundle.d as f64;
    b_norm
        * t.sqrt()
        * (bundle.xi * b_norm * b_norm * t / (2.0 * (bundle.q - 1.0))).exp()
        * bundle.c
        / t.powf(d / 2.0)
        * (-r2 / (bundle.c * t)).exp()
}

/// Reference density for the perturbation-bound check.
pub enum ReferenceDensity<'a> {
    /// exact Gaussian `N(start, var_rate t I)` (constant isotropic sigma)
    ExactGaussian { var_rate: f64 },
    /// an estimated zero-drift density on the same grid
    Estimated(&'a DensityEstimate),
}

#[derive(Clone, Debug, Serialize)]
pub struct PerturbationReport {
    pub time: f64,
    pub b_norm: f64,
    pub bins_checked: usize,
    pub violations: Vec<BinCheck>,
    /// smallest slack `rhs + 3 se - estimate` over the bins
    pub min_slack: f64,
    pub min_slack_bin: usize,
    pub pass: bool,
}

/// Per-bin check that the estimated drifted density stays below the
/// reference density plus the perturbation correction, within three
/// combined standard errors.
pub fn verify_perturbation_bound(
    p_b: &DensityEstimate,
    p_ref: ReferenceDensity<'_>,
    bundle: &ConstantsBundle,
    b_norm: f64,
) -> Result<PerturbationReport> {
    let t = p_b.time;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "t",
            value: t,
            constraint: "0 < t <= 1",
        });
    }
    if let ReferenceDensity::Estimated(e) = &p_ref {
        if e.grid != p_b.grid {
            return Err(Error::GridMismatch(
                "reference density must share the bin grid".into(),
            ));
        }
    }
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    let mut min_slack_bin = 0usize;
    for bin in 0..p_b.grid.bin_count() {
        let center = p_b.grid.center(bin);
        // bin-averaged reference (what the histogram estimates) and the
        // bin-maximal correction: the pointwise bound integrates to this
        let (ref_val, ref_se) = match &p_ref {
            ReferenceDensity::ExactGaussian { var_rate } => {
                let (lo, hi) = p_b.grid.bin_bounds(bin);
                let mass =
                    crate::stats::gaussian_box_mass(&p_b.start, var_rate * t, &lo, &hi);
                (mass / p_b.grid.bin_volume(), 0.0)
            }
            ReferenceDensity::Estimated(e) => (e.density[bin], e.se_density[bin]),
        };
        let r2 = p_b.grid.min_dist2(bin, &p_b.start);
        let corr = perturbation_correction(bundle, b_norm, t, r2);
        debug_assert!(corr >= 0.0);
        let rhs = ref_val + corr;
        let se = (p_b.se_density[bin].powi(2) + ref_se.powi(2)).sqrt();
        let slack = rhs + 3.0 * se - p_b.density[bin];
        if slack < min_slack {
            min_slack = slack;
            min_slack_bin = bin;
        }
        if slack < 0.0 {
            violations.push(BinCheck {
                bin,
                center,
                estimate: p_b.density[bin],
                stderr: se,
                lower: 0.0,
                upper: rhs,
                pass: false,
            });
        }
    }
    Ok(PerturbationReport {
        time: t,
        b_norm,
        bins_checked: p_b.grid.bin_count(),
        min_slack,
        min_slack_bin,
        pass: violations.is_empty(),
        violations,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PointCheck {
    pub y: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianPerturbationReport {
    pub time: f64,
    pub nodes_checked: usize,
    pub min_slack: f64,
    pub worst: PointCheck,
    pub pass: bool,
}

/// Zero-tolerance pointwise check of the perturbation bound when both
/// sides are in closed form: constant isotropic `sigma` and constant
/// drift `v`, so the drifted density is the shifted Gaussian.
pub fn check_perturbation_gaussian(
    var_rate: f64,
    v: &[f64],
    bundle: &ConstantsBundle,
    t: f64,
    start: &[f64],
    grid: &SpaceGrid,
) -> Result<GaussianPerturbationReport> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "t",
            value: t,
            constraint: "0 < t <= 1",
        });
    }
    let b_norm = crate::linalg::norm(v);
    let shifted: Vec<f64> = start.iter().zip(v).map(|(s, vi)| s + vi * t).collect();
    let mut min_slack = f64::INFINITY;
    let mut worst = PointCheck {
        y: vec![],
        lhs: 0.0,
        rhs: 0.0,
        slack: f64::INFINITY,
    };
    let nodes = grid.node_count();
    for node in 0..nodes {
        let y = grid.node_position(node);
        let lhs = gaussian_density(&shifted, var_rate * t, &y);
        let r2: f64 = y
            .iter()
            .zip(start)
            .map(|(yi, s)| (yi - s) * (yi - s))
            .sum();
        let rhs = gaussian_density(start, var_rate * t, &y)
            + perturbation_correction(bundle, b_norm, t, r2);
        let slack = rhs - lhs;
        if slack < min_slack {
            min_slack = slack;
            worst = PointCheck { y, lhs, rhs, slack };
        }
    }
    Ok(GaussianPerturbationReport {
        time: t,
        nodes_checked: nodes,
        min_slack,
        worst,
        pass: min_slack >= 0.0,
    })
}

/// How the left side of the representation check is produced.
pub enum LhsMode {
    /// histogram of directly simulated drifted paths on a small box
    /// around each target
    Simulate { bin_half_width: f64, paths: usize },
    /// closed-form shifted Gaussian; only valid for constant drift on a
    /// constant isotropic coefficient
    ClosedFormGaussian,
}

#[derive(Clone, Debug, Serialize)]
pub struct RepresentationTarget {
    pub y: Vec<f64>,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// envelope bound on the true contribution of the final quadrature
    /// cell, reported separately from the Monte Carlo tolerance
    pub tail_bound: f64,
    pub combined_se: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RepresentationReport {
    pub time: f64,
    pub steps: usize,
    pub paths: usize,
    pub targets: Vec<RepresentationTarget>,
    pub pass: bool,
}

/// Verify the representation formula at a set of target points.
///
/// The right side simulates driftless paths, weights them, and applies
/// left-endpoint quadrature to `E[ U_s <b, grad^g p(., t-s, y)>_g ]` on
/// the simulation grid; its standard error comes from per-path quadrature
/// totals, which captures the correlation across time cells. Agreement is
/// declared within 4 combined standard errors.
#[allow(clippy::too_many_arguments)]
pub fn verify_representation(
    spec: &DiffusionSpec,
    b: &DriftField,
    start: &[f64],
    y_targets: &[Vec<f64>],
    t: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    bundle: Option<&ConstantsBundle>,
    lhs_mode: LhsMode,
) -> Result<RepresentationReport> {
    let d = spec.dim();
    let var_rate = spec.constant_isotropic_rate().ok_or_else(|| {
        Error::InvalidSpec(
            "representation check needs a constant isotropic coefficient (exact density family)"
                .into(),
        )
    })?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "t",
            value: t,
            constraint: "0 < t <= 1",
        });
    }

    // right side: weighted zero-drift quadrature
    let ens = Arc::new(simulate_paths(
        spec,
        None,
        &[start.to_vec()],
        t,
        steps,
        paths,
        seed,
    )?);
    let weights = compute_weights(ens.clone(), b, spec)?;
    let dt = ens.dt();
    let times = ens.times().to_vec();

    let mut targets = Vec::with_capacity(y_targets.len());
    for y in y_targets {
        // per-path quadrature totals
        let totals: Vec<f64> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut b_val = vec![0.0; d];
                let mut acc = 0.0;
                for k in 0..steps {
                    let s = times[k];
                    let u = t - s;
                    let x = ens.position(p, k);
                    b.eval_into(s, x, &mut b_val).expect("drift covers horizon");
                    // gradient of the exact density in its first argument
                    let p_val = gaussian_density(x, var_rate * u, y);
                    let grad: Vec<f64> = (0..d)
                        .map(|i| (y[i] - x[i]) / (var_rate * u) * p_val)
                        .collect();
                    let metric_grad = spec.grad_g(s, x, &grad);
                    let inner = spec
                        .g_inner(s, x, &b_val, &metric_grad)
                        .expect("metric invertible");
                    acc += weights.weight(p, k) * inner * dt;
                }
                acc
            })
            .collect();
        let (integral, integral_se) = crate::stats::mean_se(&totals);
        let rhs = gaussian_density(start, var_rate * t, y) + integral;

        let tail_bound = match bundle {
            Some(bu) => {
                let r2: f64 = y
                    .iter()
                    .zip(start)
                    .map(|(yi, s)| (yi - s) * (yi - s))
                    .sum();
                representation_tail_bound(bu, b.sup_norm(), t, dt, r2)
            }
            None => f64::NAN,
        };

        let (lhs, lhs_se) = match &lhs_mode {
            LhsMode::ClosedFormGaussian => {
                let v = b.eval(0.0, start)?;
                let shifted: Vec<f64> = start.iter().zip(&v).map(|(s, vi)| s + vi * t).collect();
                (gaussian_density(&shifted, var_rate * t, y), 0.0)
            }
            LhsMode::Simulate {
                bin_half_width,
                paths: lhs_paths,
            } => {
                let lhs_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
                point_density(
                    spec,
                    Some(b),
                    start,
                    y,
                    t,
                    steps,
                    *lhs_paths,
                    *bin_half_width,
                    lhs_seed,
                )?
            }
        };

        let combined_se = (lhs_se * lhs_se + integral_se * integral_se).sqrt();
        targets.push(RepresentationTarget {
            y: y.clone(),
            lhs,
            lhs_se,
            rhs,
            rhs_se: integral_se,
            tail_bound,
            combined_se,
            pass: (lhs - rhs).abs() <= 4.0 * combined_se,
        });
    }
    let pass = targets.iter().all(|tg| tg.pass);
    Ok(RepresentationReport {
        time: t,
        steps,
        paths,
        targets,
        pass,
    })
}

/// Envelope bound for the final quadrature cell `[t - dt, t)` of the
/// representation integral, from the gradient-envelope estimate with the
/// bundle's Hoelder exponent.
pub fn representation_tail_bound(
    bundle: &ConstantsBundle,
    b_norm: f64,
    t: f64,
    dt: f64,
    r2: f64,
) -> f64 {
    let d = bundle.d as f64;
    let (a, kappa, q, xi) = (bundle.a_stroock, bundle.kappa, bundle.q, bundle.xi);
    let beta = d / (2.0 * q) - (d - 1.0) / 2.0;
    let d_q = d
        * a
        * a.exp()
        * kappa.powf(1.0 / q)
        * (a * kappa * std::f64::consts::PI / a.min(kappa * q)).powf(d / (2.0 * q));
    d * xi
        * xi
        * b_norm
        * (xi / (2.0 * (q - 1.0)) * b_norm * b_norm * t).exp()
        * d_q
        * t.powf(-d / (2.0 * q))
        * (-r2 / (a.max(kappa * q) * t)).exp()
        * dt.powf(beta)
        / beta
}

/// Gaussian-product kernel density estimate of the ensemble marginal at
/// the query points. Plot smoothing only: bound verification always runs
/// on histograms, whose bin errors are exact. `bandwidth = None` applies
/// Scott's rule per axis.
pub fn kde_density(
    ens: &PathEnsemble,
    t: f64,
    points: &[Vec<f64>],
    bandwidth: Option<f64>,
) -> Result<Vec<f64>> {
    if ens.n_starts() != 1 {
        return Err(Error::MultiStart(ens.n_starts()));
    }
    let node = ens.node_of_time(t)?;
    let d = ens.dim();
    let n = ens.n_paths();
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            return Err(Error::InvalidParameter {
                name: "bandwidth",
                value: h,
                constraint: "> 0",
            })
        }
        None => {
            // Scott's rule with the average per-axis standard deviation
            let mut mean = vec![0.0; d];
            for p in 0..n {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += ens.position(p, node)[k] / n as f64;
                }
            }
            let mut var = 0.0;
            for p in 0..n {
                let x = ens.position(p, node);
                for k in 0..d {
                    var += (x[k] - mean[k]).powi(2);
                }
            }
            let sd = (var / (d * (n - 1).max(1)) as f64).sqrt();
            sd * (n as f64).powf(-1.0 / (d as f64 + 4.0))
        }
    };
    let norm = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) / h.powi(d as i32);
    Ok(points
        .par_iter()
        .map(|q| {
            let mut acc = 0.0;
            for p in 0..n {
                let x = ens.position(p, node);
                let r2: f64 = (0..d).map(|k| ((q[k] - x[k]) / h).powi(2)).sum();
                acc += (-0.5 * r2).exp();
            }
            acc * norm / n as f64
        })
        .collect())
}

/// Histogram density of `X_t` (with or without drift) on a small box
/// around a single point; returns `(density, stderr)`.
#[allow(clippy::too_many_arguments)]
pub fn point_density(
    spec: &DiffusionSpec,
    drift: Option<&DriftField>,
    start: &[f64],
    y: &[f64],
    t: f64,
    steps: usize,
    paths: usize,
    bin_half_width: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let ens = simulate_paths(spec, drift, &[start.to_vec()], t, steps, paths, seed)?;
    let node = ens.node_of_time(t)?;
    let vol: f64 = (2.0 * bin_half_width).powi(spec.dim() as i32);
    let mut count = 0usize;
    'outer: for p in 0..paths {
        let x = ens.position(p, node);
        for k in 0..spec.dim() {
            if (x[k] - y[k]).abs() > bin_half_width {
                continue 'outer;
            }
        }
        count += 1;
    }
    let m = count as f64 / paths as f64;
    let se = (m * (1.0 - m) / paths as f64).sqrt();
    Ok((m / vol, se / vol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{build_bundle, fit_envelopes_exact, BundleInputs};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn gaussian_ensemble(n: usize, t: f64, seed: u64) -> PathEnsemble {
        let spec = DiffusionSpec::identity(2);
        simulate_paths(&spec, None, &[vec![0.0, 0.0]], t, 16, n, seed).unwrap()
    }

    #[test]
    fn mass_identity_is_exact() {
        let ens = gaussian_ensemble(20_000, 0.5, 3);
        let grid = BinGrid::centered(&[0.0, 0.0], 1.0, 8).unwrap();
        let est = estimate_density(&ens, 0.5, grid).unwrap();
        assert_relative_eq!(est.total_mass + est.out_mass, 1.0, epsilon = 1e-12);
        assert!(est.density.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn center_density_matches_heat_kernel() {
        // sigma = I, t = 0.5: p(start) = 1/(2 pi 0.5) ~ 0.318
        let n = 100_000;
        let ens = gaussian_ensemble(n, 0.5, 7);
        let grid = BinGrid::centered(&[0.0, 0.0], 1.4, 20).unwrap();
        let est = estimate_density(&ens, 0.5, grid).unwrap();
        let bin = est.grid.locate(&[1e-9, 1e-9]).unwrap();
        let exact = 1.0 / (2.0 * PI * 0.5);
        assert!(
            (est.density[bin] - exact).abs() < 4.0 * est.se_density[bin] + 0.01,
            "got {}, exact {}",
            est.density[bin],
            exact
        );
    }

    #[test]
    fn drifted_peak_moves() {
        let spec = DiffusionSpec::identity(2);
        let v = vec![2.0, 0.0];
        let b = DriftField::constant(v, 0.25, 1.0).unwrap();
        let ens = simulate_paths(&spec, Some(&b), &[vec![0.0, 0.0]], 0.25, 16, 50_000, 11).unwrap();
        let grid = BinGrid::centered(&[0.25, 0.0], 1.2, 12).unwrap();
        let est = estimate_density(&ens, 0.25, grid).unwrap();
        let peak_bin = (0..est.grid.bin_count())
            .max_by(|&a, &b| est.density[a].partial_cmp(&est.density[b]).unwrap())
            .unwrap();
        let c = est.grid.center(peak_bin);
        // mode of the shifted Gaussian is at (v t, 0) = (0.5, 0)
        assert!(crate::linalg::dist(&c, &[0.5, 0.0]) < 0.25, "peak at {c:?}");
    }

    #[test]
    fn kde_tracks_heat_kernel() {
        let ens = gaussian_ensemble(60_000, 0.5, 13);
        let pts = vec![vec![0.0, 0.0], vec![0.8, 0.0], vec![1.5, 1.5]];
        let vals = kde_density(&ens, 0.5, &pts, None).unwrap();
        for (p, v) in pts.iter().zip(&vals) {
            let exact = gaussian_density(&[0.0, 0.0], 0.5, p);
            assert!(
                (v - exact).abs() < 0.05 * (exact + 0.05),
                "kde {v} vs {exact} at {p:?}"
            );
        }
    }

    #[test]
    fn multi_start_rejected() {
        let spec = DiffusionSpec::identity(2);
        let ens =
            simulate_paths(&spec, None, &[vec![0.0, 0.0], vec![1.0, 0.0]], 0.5, 8, 10, 1).unwrap();
        let grid = BinGrid::centered(&[0.0, 0.0], 1.0, 4).unwrap();
        assert!(matches!(
            estimate_density(&ens, 0.5, grid),
            Err(Error::MultiStart(2))
        ));
    }

    #[test]
    fn aronson_exact_gaussian_envelopes() {
        // sigma = sqrt(2) I: kappa = 4 dominates everywhere, tiny kappa'
        // passes on bins with mass
        let spec = DiffusionSpec::scaled_identity(2, 2.0f64.sqrt()).unwrap();
        let ens = simulate_paths(&spec, None, &[vec![0.0, 0.0]], 0.5, 8, 50_000, 21).unwrap();
        let grid = BinGrid::centered(&[0.0, 0.0], 3.0, 15).unwrap();
        let est = estimate_density(&ens, 0.5, grid).unwrap();
        let rep = verify_aronson(&est, 4.0, 1e-6, None).unwrap();
        assert!(rep.pass, "violations: {}", rep.violations.len());
    }

    #[test]
    fn aronson_fitted_multiplicative() {
        // fit (kappa, kappa') on one set of seeds, verify on a fresh seed
        let spec = DiffusionSpec::diag_sin(2, 0.5).unwrap();
        let grid = BinGrid::centered(&[0.0, 0.0], 3.5, 13).unwrap();
        let mut points = Vec::new();
        for (i, &t) in [0.1f64, 0.25, 0.5].iter().enumerate() {
            let ens =
                simulate_paths(&spec, None, &[vec![0.0, 0.0]], t, 16, 60_000, 100 + i as u64)
                    .unwrap();
            let est = estimate_density(&ens, t, grid.clone()).unwrap();
            for bin in 0..est.grid.bin_count() {
                let c = est.grid.center(bin);
                let r = crate::linalg::dist(&c, &[0.0, 0.0]);
                points.push((t, r, est.density[bin], est.se_density[bin]));
            }
        }
        let fit = crate::constants::fit_aronson_points(2, &points).unwrap();
        assert!(fit.empirical);
        // fresh run, central 99% mass region
        let t = 0.25;
        let ens = simulate_paths(&spec, None, &[vec![0.0, 0.0]], t, 16, 60_000, 999).unwrap();
        let est = estimate_density(&ens, t, grid).unwrap();
        let radius99 = 3.0 * (2.25f64 * t).sqrt();
        let rep = verify_aronson(&est, fit.kappa, fit.kappa_prime, Some(radius99)).unwrap();
        assert!(
            rep.pass,
            "kappa={}, kappa'={}, violations={}",
            fit.kappa,
            fit.kappa_prime,
            rep.violations.len()
        );
    }

    fn identity_bundle() -> ConstantsBundle {
        let fit = fit_envelopes_exact(1.0, 2).unwrap();
        build_bundle(&BundleInputs {
            d: 2,
            xi: 1.0,
            a_stroock: fit.a_stroock,
            kappa: fit.kappa,
            kappa_prime: fit.kappa_prime,
            q: None,
            alpha: 1.0 / (2.0 * PI),
            gamma: 1.0,
            w_l1: 1.0,
            w_linf: 1.0,
            r_cutoff: None,
            tau: None,
            empirical_envelopes: false,
        })
        .unwrap()
    }

    #[test]
    fn perturbation_zero_drift_collapses() {
        let bundle = identity_bundle();
        let ens = gaussian_ensemble(50_000, 0.25, 31);
        let grid = BinGrid::centered(&[0.0, 0.0], 2.0, 11).unwrap();
        let est = estimate_density(&ens, 0.25, grid).unwrap();
        let rep = verify_perturbation_bound(
            &est,
            ReferenceDensity::ExactGaussian { var_rate: 1.0 },
            &bundle,
            0.0,
        )
        .unwrap();
        assert!(rep.pass, "violations {}", rep.violations.len());
        // correction vanishes with the drift, so the bound is just p <= p
        assert_eq!(perturbation_correction(&bundle, 0.0, 0.25, 1.0), 0.0);
    }

    #[test]
    fn perturbation_correction_monotone_to_zero() {
        let bundle = identity_bundle();
        let mut prev = f64::INFINITY;
        for &bn in &[2.0, 1.0, 0.5, 0.25, 0.1, 0.01, 0.0] {
            let c = perturbation_correction(&bundle, bn, 0.25, 0.3);
            assert!(c >= 0.0 && c <= prev);
            prev = c;
        }
    }

    #[test]
    fn gaussian_perturbation_closed_form_grid() {
        let bundle = identity_bundle();
        let t = bundle.t_l;
        let l = bundle.l;
        let v = vec![l / 2.0f64.sqrt(), -l / 2.0f64.sqrt()];
        let half = 4.0 * t.sqrt() + l * t;
        let grid = SpaceGrid::new(vec![-half, -half], vec![half, half], vec![41, 41]).unwrap();
        let rep = check_perturbation_gaussian(1.0, &v, &bundle, t, &[0.0, 0.0], &grid).unwrap();
        assert!(rep.pass, "min slack {}", rep.min_slack);
        assert_eq!(rep.nodes_checked, 41 * 41);
    }

    #[test]
    fn representation_zero_drift_trivial() {
        let spec = DiffusionSpec::identity(2);
        let b = DriftField::zero(2, 0.25);
        let rep = verify_representation(
            &spec,
            &b,
            &[0.0, 0.0],
            &[vec![0.0, 0.0], vec![0.5, 0.5]],
            0.25,
            20,
            2_000,
            5,
            None,
            LhsMode::ClosedFormGaussian,
        )
        .unwrap();
        for tg in &rep.targets {
            assert_eq!(tg.rhs_se, 0.0);
            assert_relative_eq!(tg.lhs, tg.rhs, epsilon = 1e-12);
            assert!(tg.pass);
        }
    }

    #[test]
    fn representation_constant_drift_identity() {
        let spec = DiffusionSpec::identity(2);
        let t = 0.25;
        let v = vec![1.0, -0.5];
        let b = DriftField::constant(v, t, 2.0).unwrap();
        let bundle = identity_bundle();
        let y_targets = vec![
            vec![0.0, 0.0],
            vec![0.25, -0.125],
            vec![0.4, 0.1],
            vec![-0.3, 0.2],
            vec![0.6, -0.6],
        ];
        let rep = verify_representation(
            &spec,
            &b,
            &[0.0, 0.0],
            &y_targets,
            t,
            400,
            30_000,
            12,
            Some(&bundle),
            LhsMode::ClosedFormGaussian,
        )
        .unwrap();
        assert!(rep.pass, "targets: {:#?}", rep.targets);
        for tg in &rep.targets {
            assert!(tg.tail_bound.is_finite());
        }
    }

    #[test]
    fn representation_self_consistency_varying_drift() {
        let spec = DiffusionSpec::identity(2);
        let t = 0.25;
        let grid = SpaceGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![9, 9]).unwrap();
        let b = DriftField::from_fn(vec![0.0, t], grid, |_s, x| {
            vec![(2.0 * x[1]).sin(), (1.5 * x[0]).cos()]
        })
        .unwrap();
        let y_targets = vec![
            vec![0.0, 0.0],
            vec![0.3, 0.2],
            vec![-0.2, 0.4],
            vec![0.5, -0.1],
            vec![-0.4, -0.3],
        ];
        let rep = verify_representation(
            &spec,
            &b,
            &[0.0, 0.0],
            &y_targets,
            t,
            200,
            40_000,
            17,
            None,
            LhsMode::Simulate {
                bin_half_width: 0.08,
                paths: 200_000,
            },
        )
        .unwrap();
        assert!(rep.pass, "targets: {:#?}", rep.targets);
    }

    #[test]
    fn representation_rejects_non_constant_sigma() {
        let spec = DiffusionSpec::diag_sin(2, 0.5).unwrap();
        let b = DriftField::zero(2, 0.25);
        assert!(verify_representation(
            &spec,
            &b,
            &[0.0, 0.0],
            &[vec![0.0, 0.0]],
            0.25,
            8,
            100,
            1,
            None,
            LhsMode::ClosedFormGaussian,
        )
        .is_err());
    }

    #[test]
    fn chapman_kolmogorov_smoke() {
        // compose the marginal through an intermediate time on coarse bins
        let spec = DiffusionSpec::identity(2);
        let (s, t) = (0.2, 0.5);
        let n = 60_000;
        let direct = {
            let ens = gaussian_ensemble(n, t, 41);
            let grid = BinGrid::centered(&[0.0, 0.0], 2.0, 5).unwrap();
            estimate_density(&ens, t, grid).unwrap()
        };
        // intermediate histogram
        let ens_s = gaussian_ensemble(n, s, 43);
        let mid_grid = BinGrid::centered(&[0.0, 0.0], 2.5, 7).unwrap();
        let mid = estimate_density(&ens_s, s, mid_grid).unwrap();
        // one fresh leg per intermediate bin center
        let mut composed = vec![0.0f64; direct.grid.bin_count()];
        for bin in 0..mid.grid.bin_count() {
            if mid.mass[bin] == 0.0 {
                continue;
            }
            let z = mid.grid.center(bin);
            let leg = simulate_paths(&spec, None, &[z], t - s, 8, 4_000, 47 + bin as u64).unwrap();
            let leg_est = estimate_density(&leg, t - s, direct.grid.clone()).unwrap();
            for b2 in 0..composed.len() {
                composed[b2] += mid.mass[bin] * leg_est.density[b2];
            }
        }
        // central bins agree within combined MC + coarse-bin allowance
        for b2 in 0..composed.len() {
            let c = direct.grid.center(b2);
            if crate::linalg::dist(&c, &[0.0, 0.0]) > 1.2 {
                continue;
            }
            let tol = 4.0 * direct.se_density[b2] + 0.15 * direct.density[b2] + 0.01;
            assert!(
                (composed[b2] - direct.density[b2]).abs() < tol,
                "bin {b2}: composed {} vs direct {}",
                composed[b2],
                direct.density[b2]
            );
        }
    }
}
