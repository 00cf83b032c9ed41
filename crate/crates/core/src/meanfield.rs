//! The mean-field velocity operator and its Picard fixed point.
//!
//! For a drift candidate `b`, a kernel `K` and a signed vector vorticity
//! `w`, the operator is
//!
//! ```text
//! K(b)(t, x) = integral of E[ K(x - X^b_t) | X^b_0 = y ] . w(y) dy
//! ```
//!
//! evaluated by importance sampling: initial points are drawn from the
//! uniform proposal on the support box and carry the signed weight
//! `w(y) / proposal(y)`, so the sign and direction of `w` live in the
//! weights and never in a rejection step. One simulated ensemble serves
//! every target node.
//!
//! Two design points matter for the fixed-point solver. First, common
//! random numbers: the sample draws and the path noise are keyed by the
//! budget seed only, never by the drift, so consecutive Picard iterates
//! (and contraction measurements) see the same underlying randomness.
//! Second, the Monte Carlo noise floor: samples are split into batches,
//! per-batch fields are kept, and a bootstrap over centered batch
//! differences estimates the expected sup-norm of pure noise; iteration
//! stops once the sup-difference reaches that floor.

use crate::constants::ConstantsBundle;
use crate::diffusion::{simulate_paths, DiffusionSpec, DriftField, SpaceGrid};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg;
use crate::rng::{stream, Role};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// A vector vorticity `w` with known norms, compactly supported on a box;
/// sampling uses the uniform proposal on that box.
#[derive(Clone)]
pub struct VorticitySpec {
    dim: usize,
    f: std::sync::Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    w_l1: f64,
    w_linf: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl std::fmt::Debug for VorticitySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VorticitySpec")
            .field("dim", &self.dim)
            .field("w_l1", &self.w_l1)
            .field("w_linf", &self.w_linf)
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .finish()
    }
}

impl VorticitySpec {
    /// Product-cosine bump carried in the first component:
    /// `w_1(y) = h prod_j cos^2(pi y_j / (2 r))` on `[-r, r]^d`, other
    /// components zero. Exact norms: `|w|_1 = h r^d`, `|w|_inf = h`.
    pub fn cosine_bump(dim: usize, height: f64, radius: f64) -> Result<Self> {
        if !(height > 0.0 && radius > 0.0) {
            return Err(Error::InvalidParameter {
                name: "height/radius",
                value: height.min(radius),
                constraint: "> 0",
            });
        }
        let f = move |y: &[f64]| -> Vec<f64> {
            let mut v = vec![0.0; y.len()];
            let mut prod = height;
            for &yj in y {
                if yj.abs() >= radius {
                    return v;
                }
                let c = (std::f64::consts::PI * yj / (2.0 * radius)).cos();
                prod *= c * c;
            }
            v[0] = prod;
            v
        };
        Ok(Self {
            dim,
            f: std::sync::Arc::new(f),
            w_l1: height * radius.powi(dim as i32),
            w_linf: height,
            lo: vec![-radius; dim],
            hi: vec![radius; dim],
        })
    }

    /// The zero vorticity on `[-1, 1]^d`.
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            f: std::sync::Arc::new(|y: &[f64]| vec![0.0; y.len()]),
            w_l1: 0.0,
            w_linf: 0.0,
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    /// User-supplied vorticity. The constructor spot-checks that `w`
    /// vanishes outside the support box (the uniform proposal must
    /// dominate `|w|`) and that `|w| <= w_linf` inside.
    pub fn custom(
        dim: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        w_l1: f64,
        w_linf: f64,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Result<Self> {
        if lo.len() != dim || hi.len() != dim || lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(Error::Proposal("support box is degenerate".into()));
        }
        let spec = Self {
            dim,
            f: std::sync::Arc::new(f),
            w_l1,
            w_linf,
            lo,
            hi,
        };
        let mut rng = stream(0xC0FFEE, Role::Probe, 9, 0);
        for _ in 0..2000 {
            // inflate the box; anything outside must vanish
            let y: Vec<f64> = (0..dim)
                .map(|k| {
                    let span = spec.hi[k] - spec.lo[k];
                    rng.gen_range(spec.lo[k] - span..spec.hi[k] + span)
                })
                .collect();
            let inside = (0..dim).all(|k| y[k] >= spec.lo[k] && y[k] <= spec.hi[k]);
            let v = linalg::norm(&(spec.f)(&y));
            if !inside && v != 0.0 {
                return Err(Error::Proposal(format!(
                    "w does not vanish outside the support box at {y:?}"
                )));
            }
            if inside && v > w_linf * (1.0 + 1e-9) {
                return Err(Error::Proposal(format!(
                    "|w({y:?})| = {v} exceeds the declared sup-norm {w_linf}"
                )));
            }
        }
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn w_l1(&self) -> f64 {
        self.w_l1
    }

    pub fn w_linf(&self) -> f64 {
        self.w_linf
    }

    pub fn support(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn eval(&self, y: &[f64]) -> Vec<f64> {
        (self.f)(y)
    }

    pub fn box_volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Draw one proposal point from the keyed stream.
    pub fn sample_point(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim)
            .map(|k| rng.gen_range(self.lo[k]..self.hi[k]))
            .collect()
    }
}

/// Monte Carlo budget of one operator application.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct McBudget {
    /// initial points drawn from the proposal
    pub samples: usize,
    /// simulated paths per initial point
    pub paths: usize,
    pub seed: u64,
}

/// Target grid of the operator output plus the simulation refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorGrids {
    pub times: Vec<f64>,
    pub space: SpaceGrid,
    /// simulation steps per time interval
    pub substeps: usize,
}

impl OperatorGrids {
    /// Uniform times `0 = t_0 < ... < t_{n-1} = horizon`.
    pub fn uniform(horizon: f64, n_times: usize, space: SpaceGrid, substeps: usize) -> Result<Self> {
        if n_times < 2 || substeps == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidSpec(
                "operator grid needs horizon > 0, >= 2 times, >= 1 substep".into(),
            ));
        }
        let times = (0..n_times)
            .map(|i| horizon * i as f64 / (n_times - 1) as f64)
            .collect();
        Ok(Self {
            times,
            space,
            substeps,
        })
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn sim_steps(&self) -> usize {
        (self.times.len() - 1) * self.substeps
    }
}

/// Result of one operator application.
#[derive(Clone, Debug)]
pub struct OperatorOutput {
    pub field: DriftField,
    /// per-node scalar standard error (norm across components)
    pub node_se: Vec<f64>,
    pub max_se: f64,
    pub singular_hits: usize,
    pub singular_rate: f64,
    /// raised when more than 1% of kernel evaluations hit the
    /// regularized core
    pub quality_warning: bool,
    /// per-batch normalized fields, kept for noise-floor bootstraps
    pub batch_fields: Option<Vec<Vec<f64>>>,
    pub batch_members: Option<Vec<usize>>,
}

const N_BATCHES: usize = 32;

/// Evaluate the velocity operator on the target grid.
pub fn apply_kernel_operator(
    b: Option<&DriftField>,
    kernel: &KernelSpec,
    w: &VorticitySpec,
    spec: &DiffusionSpec,
    grids: &OperatorGrids,
    mc: &McBudget,
    keep_batches: bool,
) -> Result<OperatorOutput> {
    let d = spec.dim();
    if kernel.dim() != d || w.dim() != d || grids.space.dim() != d {
        return Err(Error::GridMismatch("dimension mismatch".into()));
    }
    if mc.samples == 0 || mc.paths == 0 {
        return Err(Error::InvalidSpec("empty Monte Carlo budget".into()));
    }
    if w.box_volume() <= 0.0 {
        return Err(Error::Proposal("support box has zero volume".into()));
    }
    let horizon = grids.horizon();

    // proposal draws and signed importance weights; keyed per sample so
    // the draw never depends on batch layout or iteration order
    let vol = w.box_volume();
    let starts: Vec<Vec<f64>> = (0..mc.samples)
        .map(|i| {
            let mut rng = stream(mc.seed, Role::Sample, i as u64, 0);
            w.sample_point(&mut rng)
        })
        .collect();
    let sample_weights: Vec<Vec<f64>> = starts
        .iter()
        .map(|y| {
            let mut v = w.eval(y);
            for vi in v.iter_mut() {
                *vi *= vol;
            }
            v
        })
        .collect();

    let ens = simulate_paths(spec, b, &starts, horizon, grids.sim_steps(), mc.paths, mc.seed)?;

    let n_times = grids.times.len();
    let n_nodes = grids.space.node_count();
    let node_pos: Vec<Vec<f64>> = (0..n_nodes).map(|i| grids.space.node_position(i)).collect();
    let field_len = n_times * n_nodes * d;

    // contiguous sample ranges per batch
    let n_batches = N_BATCHES.min(mc.samples);
    let ranges: Vec<(usize, usize)> = (0..n_batches)
        .map(|bi| {
            let a = bi * mc.samples / n_batches;
            let z = (bi + 1) * mc.samples / n_batches;
            (a, z)
        })
        .collect();

    struct BatchAcc {
        sum: Vec<f64>,
        hits: usize,
        members: usize,
    }

    let batches: Vec<BatchAcc> = ranges
        .par_iter()
        .map(|&(a, z)| {
            let mut sum = vec![0.0; field_len];
            let mut hits = 0usize;
            let mut out = vec![0.0; d];
            let mut u = vec![0.0; d];
            for i in a..z {
                let wv = &sample_weights[i];
                if wv.iter().all(|&c| c == 0.0) {
                    continue;
                }
                for rep in 0..mc.paths {
                    let path = i * mc.paths + rep;
                    for (ti, _t) in grids.times.iter().enumerate() {
                        let pos = ens.position(path, ti * grids.substeps);
                        for (node, xp) in node_pos.iter().enumerate() {
                            for k in 0..d {
                                u[k] = xp[k] - pos[k];
                            }
                            if kernel.apply_regularized(&u, wv, &mut out) {
                                hits += 1;
                            }
                            let off = (ti * n_nodes + node) * d;
                            for k in 0..d {
                                sum[off + k] += out[k];
                            }
                        }
                    }
                }
            }
            BatchAcc {
                sum,
                hits,
                members: (z - a) * mc.paths,
            }
        })
        .collect();

    // deterministic sequential reduction in batch order
    let total_members: usize = batches.iter().map(|b| b.members).sum();
    let mut values = vec![0.0; field_len];
    let mut singular_hits = 0usize;
    for acc in &batches {
        singular_hits += acc.hits;
        for (v, s) in values.iter_mut().zip(&acc.sum) {
            *v += s;
        }
    }
    let scale = 1.0 / total_members as f64;
    for v in values.iter_mut() {
        *v *= scale;
    }

    // per-node standard errors from the scatter of batch means
    let batch_fields: Vec<Vec<f64>> = batches
        .iter()
        .map(|acc| {
            let s = 1.0 / acc.members.max(1) as f64;
            acc.sum.iter().map(|x| x * s).collect()
        })
        .collect();
    let mut node_se = vec![0.0; n_times * n_nodes];
    if n_batches > 1 {
        for slot in 0..n_times * n_nodes {
            let mut acc = 0.0;
            for k in 0..d {
                let idx = slot * d + k;
                let mean = values[idx];
                let var = batch_fields
                    .iter()
                    .map(|f| (f[idx] - mean) * (f[idx] - mean))
                    .sum::<f64>()
                    / (n_batches - 1) as f64;
                acc += var / n_batches as f64;
            }
            node_se[slot] = acc.sqrt();
        }
    }
    let max_se = node_se.iter().fold(0.0f64, |a, &b| a.max(b));

    let evals = total_members * n_times * n_nodes;
    let singular_rate = singular_hits as f64 / evals.max(1) as f64;

    let field = DriftField::from_values(grids.times.clone(), grids.space.clone(), values)?;
    Ok(OperatorOutput {
        field,
        node_se,
        max_se,
        singular_hits,
        singular_rate,
        quality_warning: singular_rate > 0.01,
        batch_fields: if keep_batches {
            Some(batch_fields)
        } else {
            None
        },
        batch_members: if keep_batches {
            Some(batches.iter().map(|b| b.members).collect())
        } else {
            None
        },
    })
}

/// Bootstrap estimate of the expected sup-norm of pure Monte Carlo noise
/// in the difference of two operator outputs computed under common random
/// numbers. Batch differences are centered and resampled; the returned
/// floor is mean + 2 sd of the resampled sup-norms.
pub fn bootstrap_noise_floor(
    prev: &OperatorOutput,
    curr: &OperatorOutput,
    dim: usize,
    rounds: usize,
    seed: u64,
) -> Option<f64> {
    let (pa, ca) = (prev.batch_fields.as_ref()?, curr.batch_fields.as_ref()?);
    if pa.len() != ca.len() || pa.len() < 2 {
        return None;
    }
    let n_b = pa.len();
    let len = pa[0].len();
    // centered per-batch differences
    let mut diffs: Vec<Vec<f64>> = (0..n_b)
        .map(|bi| (0..len).map(|j| ca[bi][j] - pa[bi][j]).collect())
        .collect();
    let mut mean = vec![0.0; len];
    for dvec in &diffs {
        for (m, v) in mean.iter_mut().zip(dvec) {
            *m += v / n_b as f64;
        }
    }
    for dvec in diffs.iter_mut() {
        for (v, m) in dvec.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let sup_of = |field: &[f64]| -> f64 {
        field
            .chunks(dim)
            .map(linalg::norm)
            .fold(0.0f64, f64::max)
    };
    let mut stats = Vec::with_capacity(rounds);
    let mut resampled = vec![0.0; len];
    for round in 0..rounds {
        let mut rng = stream(seed, Role::Bootstrap, round as u64, 0);
        resampled.fill(0.0);
        for _ in 0..n_b {
            let pick = rng.gen_range(0..n_b);
            for (r, v) in resampled.iter_mut().zip(&diffs[pick]) {
                *r += v / n_b as f64;
            }
        }
        stats.push(sup_of(&resampled));
    }
    let (m, _) = crate::stats::mean_se(&stats);
    let sd = (stats.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (rounds - 1) as f64).sqrt();
    Some(m + 2.0 * sd)
}

/// Fixed-point iteration record.
#[derive(Clone, Debug)]
pub struct FixpointReport {
    pub iterates: Vec<DriftField>,
    pub sup_diffs: Vec<f64>,
    /// `sup_diffs[k+1] / sup_diffs[k]` where the denominator exceeds the
    /// noise floor
    pub ratios: Vec<f64>,
    pub theoretical_factor: f64,
    pub converged: bool,
    pub noise_floor: f64,
    pub singular_rates: Vec<f64>,
}

/// Iterate `b_{k+1} = K(b_k)` under common random numbers until the
/// sup-difference drops to `max(tol, noise floor)` or `max_iter`.
///
/// Caller contract: the grid horizon must stay below the admissible
/// `tau_max` of the scenario's constants and `b0` must lie in the drift
/// ball; outside that regime the map need not contract and the iteration
/// may trip the divergence abort.
#[allow(clippy::too_many_arguments)]
pub fn picard(
    b0: &DriftField,
    tol: f64,
    max_iter: usize,
    kernel: &KernelSpec,
    w: &VorticitySpec,
    spec: &DiffusionSpec,
    grids: &OperatorGrids,
    mc: &McBudget,
    theoretical_factor: f64,
) -> Result<FixpointReport> {
    if b0.times() != grids.times.as_slice() || b0.grid() != &grids.space {
        return Err(Error::GridMismatch(
            "initial drift must live on the operator grid".into(),
        ));
    }
    let mut iterates = vec![b0.clone()];
    let mut sup_diffs = Vec::new();
    let mut ratios = Vec::new();
    let mut singular_rates = Vec::new();
    let mut prev_out: Option<OperatorOutput> = None;
    let mut noise_floor = 0.0f64;
    let mut converged = false;
    let mut growth_streak = 0usize;

    for iter in 0..max_iter {
        let out = apply_kernel_operator(
            Some(iterates.last().unwrap()),
            kernel,
            w,
            spec,
            grids,
            mc,
            true,
        )?;
        singular_rates.push(out.singular_rate);
        let diff = out.field.sup_distance(iterates.last().unwrap())?;
        if let Some(prev) = &prev_out {
            if let Some(floor) = bootstrap_noise_floor(prev, &out, spec.dim(), 200, mc.seed) {
                noise_floor = noise_floor.max(floor);
            }
        }
        if let Some(&last) = sup_diffs.last() {
            if last > noise_floor.max(tol) {
                ratios.push(diff / last);
            }
            growth_streak = update_growth_streak(growth_streak, last, diff, noise_floor.max(tol));
            if growth_streak >= 3 {
                sup_diffs.push(diff);
                return Err(Error::Diverged {
                    iterations: iter + 1,
                    diffs: sup_diffs,
                });
            }
        }
        sup_diffs.push(diff);
        iterates.push(out.field.clone());
        let stop = diff <= tol.max(noise_floor);
        prev_out = Some(out);
        if stop {
            converged = true;
            break;
        }
    }

    Ok(FixpointReport {
        iterates,
        sup_diffs,
        ratios,
        theoretical_factor,
        converged,
        noise_floor,
        singular_rates,
    })
}

/// Consecutive sup-difference growth above the noise level counts toward
/// the divergence abort; any non-growth resets the streak.
fn update_growth_streak(streak: usize, last: f64, current: f64, noise: f64) -> usize {
    if current > last && current > noise {
        streak + 1
    } else {
        0
    }
}

/// Contraction measurement for one drift pair under common random numbers.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionMeasurement {
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    /// three bootstrap-sup standard allowances of the numerator, divided
    /// by the denominator
    pub mc_tolerance: f64,
    pub theoretical_factor: f64,
    pub pass: bool,
}

/// Measure `|K(b) - K(b~)|_inf / |b - b~|_inf` with common random
/// numbers; passing means ratio < 1 and ratio <= factor + tolerance.
pub fn measure_contraction(
    b: &DriftField,
    b_tilde: &DriftField,
    kernel: &KernelSpec,
    w: &VorticitySpec,
    spec: &DiffusionSpec,
    grids: &OperatorGrids,
    mc: &McBudget,
    theoretical_factor: f64,
) -> Result<ContractionMeasurement> {
    let out_a = apply_kernel_operator(Some(b), kernel, w, spec, grids, mc, true)?;
    let out_b = apply_kernel_operator(Some(b_tilde), kernel, w, spec, grids, mc, true)?;
    let numerator = out_a.field.sup_distance(&out_b.field)?;
    let denominator = b.sup_distance(b_tilde)?;
    if denominator == 0.0 {
        return Err(Error::InvalidSpec("drift pair is identical".into()));
    }
    let noise = bootstrap_noise_floor(&out_a, &out_b, spec.dim(), 200, mc.seed).unwrap_or(0.0);
    let ratio = numerator / denominator;
    let mc_tolerance = 3.0 * noise / denominator;
    Ok(ContractionMeasurement {
        numerator,
        denominator,
        ratio,
        mc_tolerance,
        theoretical_factor,
        pass: ratio < 1.0 && ratio <= theoretical_factor + mc_tolerance,
    })
}

/// Report of the two cutoff-kernel moment bounds at one `(t, x, R)`.
#[derive(Clone, Debug, Serialize)]
pub struct CutoffReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub r: f64,
    pub b_norm: f64,
    pub ball_estimate: f64,
    pub ball_se: f64,
    pub ball_bound: f64,
    pub ball_pass: bool,
    pub comp_estimate: f64,
    pub comp_se: f64,
    pub comp_bound: f64,
    pub comp_pass: bool,
    pub singular_hits: usize,
}

/// Monte Carlo check of the two moment bounds for the kernel split at
/// radius `r`:
///
/// ```text
/// int E^y[ |K_{ball}(x - X^b_t)| ] |w(y)| dy
///   <= 2 alpha C^{1+d/2} pi^d R^{d-gamma} |w|_inf / (Gamma(d/2)(d-gamma))
///      . (1 + |b|_inf sqrt(t) e^{xi |b|_inf^2 t/(2(q-1))})
/// int E^y[ |K_{comp}(x - X^b_t)| ] |w(y)| dy  <=  alpha |w|_1 / R^gamma
/// ```
///
/// Passing means `estimate <= bound + 3 stderr`.
#[allow(clippy::too_many_arguments)]
pub fn verify_cutoff_bounds(
    b: Option<&DriftField>,
    kernel: &KernelSpec,
    w: &VorticitySpec,
    spec: &DiffusionSpec,
    bundle: &ConstantsBundle,
    r: f64,
    t: f64,
    x: &[f64],
    steps: usize,
    mc: &McBudget,
) -> Result<CutoffReport> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "t",
            value: t,
            constraint: "0 < t <= 1",
        });
    }
    if !(r > 0.0) {
        return Err(Error::InvalidParameter {
            name: "r",
            value: r,
            constraint: "> 0",
        });
    }
    let d = spec.dim();
    let vol = w.box_volume();
    let starts: Vec<Vec<f64>> = (0..mc.samples)
        .map(|i| {
            let mut rng = stream(mc.seed, Role::Sample, i as u64, 0);
            w.sample_point(&mut rng)
        })
        .collect();
    let ens = simulate_paths(spec, b, &starts, t, steps, mc.paths, mc.seed)?;
    let node = ens.node_of_time(t)?;

    let members = mc.samples * mc.paths;
    let mut ball_vals = vec![0.0f64; members];
    let mut comp_vals = vec![0.0f64; members];
    let hits: usize = ball_vals
        .par_chunks_mut(mc.paths)
        .zip(comp_vals.par_chunks_mut(mc.paths))
        .enumerate()
        .map(|(i, (bv, cv))| {
            let wy = linalg::norm(&w.eval(&starts[i])) * vol;
            let mut u = vec![0.0; d];
            let mut local_hits = 0usize;
            for rep in 0..mc.paths {
                let path = i * mc.paths + rep;
                let pos = ens.position(path, node);
                for k in 0..d {
                    u[k] = x[k] - pos[k];
                }
                let (norm_val, clamped) = kernel.norm_regularized(&u);
                if clamped {
                    local_hits += 1;
                }
                if kernel.in_ball(r, &u) {
                    bv[rep] = norm_val * wy;
                } else {
                    cv[rep] = norm_val * wy;
                }
            }
            local_hits
        })
        .sum();

    let (ball_estimate, ball_se) = crate::stats::mean_se(&ball_vals);
    let (comp_estimate, comp_se) = crate::stats::mean_se(&comp_vals);

    let b_norm = b.map(|f| f.sup_norm()).unwrap_or(0.0);
    let df = d as f64;
    let drift_factor = 1.0
        + b_norm
            * t.sqrt()
            * (bundle.xi * b_norm * b_norm * t / (2.0 * (bundle.q - 1.0))).exp();
    let ball_bound = 2.0
        * bundle.alpha
        * bundle.c.powf(1.0 + df / 2.0)
        * std::f64::consts::PI.powf(df)
        * r.powf(df - bundle.gamma)
        * bundle.w_linf
        / (statrs::function::gamma::gamma(df / 2.0) * (df - bundle.gamma))
        * drift_factor;
    let comp_bound = bundle.alpha * bundle.w_l1 / r.powf(bundle.gamma);

    Ok(CutoffReport {
        t,
        x: x.to_vec(),
        r,
        b_norm,
        ball_estimate,
        ball_se,
        ball_bound,
        ball_pass: ball_estimate <= ball_bound + 3.0 * ball_se,
        comp_estimate,
        comp_se,
        comp_bound,
        comp_pass: comp_estimate <= comp_bound + 3.0 * comp_se,
        singular_hits: hits,
    })
}

/// Report of the ball-stability check `|K(b)|_inf <= L`.
#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub sup_norm: f64,
    pub max_se: f64,
    pub l: f64,
    pub pass: bool,
    pub singular_rate: f64,
}

/// Check that the operator maps the drift ball into itself on the grid:
/// the sup-norm of `K(b)` stays at or below `L` up to Monte Carlo
/// tolerance. Requires `|b|_inf <= L` and a horizon within `T_L`.
pub fn verify_ball_invariance(
    b: Option<&DriftField>,
    kernel: &KernelSpec,
    w: &VorticitySpec,
    spec: &DiffusionSpec,
    bundle: &ConstantsBundle,
    grids: &OperatorGrids,
    mc: &McBudget,
) -> Result<InvarianceReport> {
    if let Some(field) = b {
        if !field.in_ball(bundle.l * (1.0 + 1e-12)) {
            return Err(Error::InvalidSpec(format!(
                "drift sup-norm {} exceeds L = {}",
                field.sup_norm(),
                bundle.l
            )));
        }
    }
    if grids.horizon() > bundle.t_l * (1.0 + 1e-9) {
        return Err(Error::InvalidSpec(format!(
            "horizon {} exceeds T_L = {}",
            grids.horizon(),
            bundle.t_l
        )));
    }
    let out = apply_kernel_operator(b, kernel, w, spec, grids, mc, false)?;
    let sup = out.field.sup_norm();
    Ok(InvarianceReport {
        sup_norm: sup,
        max_se: out.max_se,
        l: bundle.l,
        pass: sup <= bundle.l + 3.0 * out.max_se,
        singular_rate: out.singular_rate,
    })
}
