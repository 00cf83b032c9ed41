//! Noise coefficients, bounded drift fields and Euler-Maruyama path
//! ensembles.
//!
//! The metric of a coefficient `sigma` is `g = sigma^T sigma`; uniform
//! ellipticity means the eigenvalues of `g` stay inside `[1/xi, xi]`.
//! `g_inner` is the inner product weighted by the inverse metric and
//! `grad_g` the metric gradient `g . grad`, which together make up the
//! exponent of the Girsanov weight.
//!
//! Path ensembles store, per step, both the raw Brownian increment and
//! the martingale increment `dM = sigma(t_k, X_k) dB_k` exactly as it
//! entered the position update, so a weight computed later integrates
//! against the same numbers the simulation used.

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream, Role};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Noise coefficient selection. All built-ins are diagonal, hence
/// symmetric, so `sigma sigma^T = sigma^T sigma` and the martingale part
/// has quadratic covariation `g`.
#[derive(Clone)]
pub enum SigmaRule {
    Identity,
    /// `c . I`
    Scaled(f64),
    /// constant diagonal
    DiagConst(Vec<f64>),
    /// `diag(1 + a sin(x_d), 1, ..., 1)` - the multiplicative test family
    DiagSin { amplitude: f64 },
    /// user rule writing a row-major `d x d` matrix
    Custom(Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>),
}

impl std::fmt::Debug for SigmaRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaRule::Identity => write!(f, "Identity"),
            SigmaRule::Scaled(c) => write!(f, "Scaled({c})"),
            SigmaRule::DiagConst(v) => write!(f, "DiagConst({v:?})"),
            SigmaRule::DiagSin { amplitude } => write!(f, "DiagSin({amplitude})"),
            SigmaRule::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// The noise coefficient `sigma(t, x)`, its ellipticity constant and the
/// optional gradient-envelope constant used by the explicit bounds.
#[derive(Clone, Debug)]
pub struct DiffusionSpec {
    dim: usize,
    rule: SigmaRule,
    xi: f64,
    grad_bound: Option<f64>,
}

impl DiffusionSpec {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            rule: SigmaRule::Identity,
            xi: 1.0,
            grad_bound: None,
        }
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Result<Self> {
        if !(c != 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "scale",
                value: c,
                constraint: "nonzero finite",
            });
        }
        let c2 = c * c;
        Ok(Self {
            dim,
            rule: SigmaRule::Scaled(c),
            xi: (c2.max(1.0 / c2)).max(1.0),
            grad_bound: None,
        })
    }

    pub fn diag_const(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() || entries.iter().any(|&e| e == 0.0 || !e.is_finite()) {
            return Err(Error::InvalidSpec(
                "diag-const entries must be nonzero and finite".into(),
            ));
        }
        let dim = entries.len();
        let xi = entries
            .iter()
            .map(|&e| (e * e).max(1.0 / (e * e)))
            .fold(1.0f64, f64::max);
        Ok(Self {
            dim,
            rule: SigmaRule::DiagConst(entries),
            xi,
            grad_bound: None,
        })
    }

    /// `diag(1 + a sin(x_d), 1, ..., 1)` with `|a| < 1`.
    pub fn diag_sin(dim: usize, amplitude: f64) -> Result<Self> {
        if !(amplitude.abs() < 1.0) {
            return Err(Error::InvalidParameter {
                name: "amplitude",
                value: amplitude,
                constraint: "|a| < 1",
            });
        }
        let hi = (1.0 + amplitude.abs()).powi(2);
        let lo = (1.0 - amplitude.abs()).powi(2);
        Ok(Self {
            dim,
            rule: SigmaRule::DiagSin { amplitude },
            xi: hi.max(1.0 / lo),
            grad_bound: None,
        })
    }

    /// A custom rule; `xi` is the caller's ellipticity certificate and is
    /// spot-checked by [`DiffusionSpec::check_ellipticity`].
    pub fn custom(
        dim: usize,
        xi: f64,
        rule: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(xi >= 1.0) {
            return Err(Error::InvalidParameter {
                name: "xi",
                value: xi,
                constraint: "xi >= 1",
            });
        }
        Ok(Self {
            dim,
            rule: SigmaRule::Custom(Arc::new(rule)),
            xi,
            grad_bound: None,
        })
    }

    pub fn with_grad_bound(mut self, a: f64) -> Self {
        self.grad_bound = Some(a);
        self
    }

    /// Widen the ellipticity constant (a looser certificate is always
    /// valid; a tighter one is rejected).
    pub fn with_xi(mut self, xi: f64) -> Result<Self> {
        if xi < self.xi {
            return Err(Error::InvalidParameter {
                name: "xi",
                value: xi,
                constraint: "xi must not undercut the family's ellipticity constant",
            });
        }
        self.xi = xi;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn grad_bound(&self) -> Option<f64> {
        self.grad_bound
    }

    /// Whether `sigma` is constant in `(t, x)`; those specs have exact
    /// Gaussian transition densities.
    pub fn is_constant(&self) -> bool {
        matches!(
            self.rule,
            SigmaRule::Identity | SigmaRule::Scaled(_) | SigmaRule::DiagConst(_)
        )
    }

    /// For a constant scaled-identity coefficient, the variance rate `c^2`
    /// such that `X_t ~ N(x, c^2 t I)`.
    pub fn constant_isotropic_rate(&self) -> Option<f64> {
        match &self.rule {
            SigmaRule::Identity => Some(1.0),
            SigmaRule::Scaled(c) => Some(c * c),
            SigmaRule::DiagConst(v) if v.iter().all(|&e| e == v[0]) => Some(v[0] * v[0]),
            _ => None,
        }
    }

    /// Write `sigma(t, x)` row-major into `out`.
    pub fn sigma_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.rule {
            SigmaRule::Identity => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = 1.0;
                }
            }
            SigmaRule::Scaled(c) => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = *c;
                }
            }
            SigmaRule::DiagConst(v) => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = v[i];
                }
            }
            SigmaRule::DiagSin { amplitude } => {
                out.fill(0.0);
                out[0] = 1.0 + amplitude * x[d - 1].sin();
                for i in 1..d {
                    out[i * d + i] = 1.0;
                }
            }
            SigmaRule::Custom(f) => f(t, x, out),
        }
    }

    /// The metric `g(t, x) = sigma^T sigma`.
    pub fn metric_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut sigma = vec![0.0; d * d];
        self.sigma_into(t, x, &mut sigma);
        linalg::gram(&sigma, out);
    }

    /// Inner product `a^T g(t,x)^{-1} c` with respect to the inverse
    /// metric. Fails when `g` is not invertible, which signals an invalid
    /// specification.
    pub fn g_inner(&self, t: f64, x: &[f64], a: &[f64], c: &[f64]) -> Result<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d * d];
        let mut ginv = vec![0.0; d * d];
        let mut scratch = vec![0.0; d * d];
        self.metric_into(t, x, &mut g);
        if !linalg::invert(&g, &mut ginv, &mut scratch) {
            return Err(Error::InvalidSpec(format!(
                "metric not invertible at t={t}, x={x:?}"
            )));
        }
        Ok(linalg::quad_form(&ginv, a, c))
    }

    /// Metric gradient: maps a Euclidean gradient `v` to `g(t,x) . v`.
    pub fn grad_g(&self, t: f64, x: &[f64], euclidean_gradient: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d * d];
        self.metric_into(t, x, &mut g);
        let mut out = vec![0.0; d];
        linalg::matvec(&g, euclidean_gradient, &mut out);
        out
    }

    /// Sample `(t, x)` points and verify the eigenvalues of `g` stay in
    /// `[1/xi, xi]`.
    pub fn check_ellipticity(&self, n: usize, box_half_width: f64, seed: u64) -> Result<()> {
        let mut rng = stream(seed, Role::Probe, 1, 0);
        let d = self.dim;
        let mut g = vec![0.0; d * d];
        for _ in 0..n {
            let t: f64 = rng.gen_range(0.0..1.0);
            let x: Vec<f64> = (0..d)
                .map(|_| rng.gen_range(-box_half_width..box_half_width))
                .collect();
            self.metric_into(t, &x, &mut g);
            let slack = 1.0 + 1e-9;
            if !linalg::sym_eigs_within(&g, 1.0 / (self.xi * slack), self.xi * slack) {
                return Err(Error::InvalidSpec(format!(
                    "metric eigenvalues escape [1/xi, xi] at t={t}, x={x:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Rectangular spatial grid with per-axis node counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl SpaceGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != nodes.len() || lo.is_empty() {
            return Err(Error::InvalidSpec("grid axis lists must match".into()));
        }
        for k in 0..lo.len() {
            if !(lo[k] < hi[k]) && nodes[k] > 1 {
                return Err(Error::InvalidSpec(format!("axis {k}: lo must be < hi")));
            }
            if nodes[k] == 0 {
                return Err(Error::InvalidSpec(format!("axis {k}: needs >= 1 node")));
            }
        }
        Ok(Self { lo, hi, nodes })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Coordinates of the node with flat index `idx` (row-major, axis 0
    /// slowest).
    pub fn node_position(&self, idx: usize) -> Vec<f64> {
        let d = self.dim();
        let mut pos = vec![0.0; d];
        let mut rem = idx;
        for axis in (0..d).rev() {
            let n = self.nodes[axis];
            let i = rem % n;
            rem /= n;
            pos[axis] = if n == 1 {
                0.5 * (self.lo[axis] + self.hi[axis])
            } else {
                self.lo[axis]
                    + (self.hi[axis] - self.lo[axis]) * (i as f64) / ((n - 1) as f64)
            };
        }
        pos
    }
}

/// Interpolation rule identifier. Only one rule is built: piecewise
/// constant in time (left node) and multilinear in space with clamping to
/// the nearest node outside the box, which keeps the interpolated field
/// inside the convex hull of the node values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterpRule {
    PiecewiseConstTimeMultilinearSpace,
}

/// A bounded measurable drift candidate sampled on a space-time grid.
#[derive(Clone, Debug)]
pub struct DriftField {
    dim: usize,
    times: Vec<f64>,
    grid: SpaceGrid,
    /// `[time][node][component]`, flattened
    values: Vec<f64>,
    sup_norm: f64,
    interp: InterpRule,
}

impl DriftField {
    /// Build a field from explicit node values laid out `[time][node][dim]`.
    pub fn from_values(times: Vec<f64>, grid: SpaceGrid, values: Vec<f64>) -> Result<Self> {
        let dim = grid.dim();
        if times.is_empty() {
            return Err(Error::InvalidSpec("time grid is empty".into()));
        }
        if times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) && times.len() > 1 {
            return Err(Error::InvalidSpec(
                "time grid must be nonnegative and strictly increasing".into(),
            ));
        }
        let expected = times.len() * grid.node_count() * dim;
        if values.len() != expected {
            return Err(Error::GridMismatch(format!(
                "value buffer has {} entries, expected {}",
                values.len(),
                expected
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("drift values must be finite".into()));
        }
        let sup_norm = values
            .chunks(dim)
            .map(linalg::norm)
            .fold(0.0f64, f64::max);
        Ok(Self {
            dim,
            times,
            grid,
            values,
            sup_norm,
            interp: InterpRule::PiecewiseConstTimeMultilinearSpace,
        })
    }

    /// Sample a function `b(t, x)` on the grid.
    pub fn from_fn(
        times: Vec<f64>,
        grid: SpaceGrid,
        f: impl Fn(f64, &[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let dim = grid.dim();
        let nodes = grid.node_count();
        let mut values = vec![0.0; times.len() * nodes * dim];
        for (ti, &t) in times.iter().enumerate() {
            for node in 0..nodes {
                let x = grid.node_position(node);
                let v = f(t, &x);
                let off = (ti * nodes + node) * dim;
                values[off..off + dim].copy_from_slice(&v);
            }
        }
        Self::from_values(times, grid, values)
    }

    /// Constant-in-space-and-time field `b = v` on `[0, horizon]`.
    pub fn constant(v: Vec<f64>, horizon: f64, half_width: f64) -> Result<Self> {
        let d = v.len();
        let grid = SpaceGrid::new(vec![-half_width; d], vec![half_width; d], vec![2; d])?;
        let times = vec![0.0, horizon];
        let nodes = grid.node_count();
        let mut values = Vec::with_capacity(times.len() * nodes * d);
        for _ in 0..times.len() * nodes {
            values.extend_from_slice(&v);
        }
        Self::from_values(times, grid, values)
    }

    /// The zero field on `[0, horizon]`.
    pub fn zero(dim: usize, horizon: f64) -> Self {
        Self::constant(vec![0.0; dim], horizon, 1.0).expect("zero field is always valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn grid(&self) -> &SpaceGrid {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn interp_rule(&self) -> InterpRule {
        self.interp
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Whether the field belongs to the ball of drifts bounded by `l`.
    pub fn in_ball(&self, l: f64) -> bool {
        self.sup_norm <= l
    }

    /// Node value at `(time index, node index)`.
    pub fn node_value(&self, ti: usize, node: usize) -> &[f64] {
        let off = (ti * self.grid.node_count() + node) * self.dim;
        &self.values[off..off + self.dim]
    }

    /// Sup-norm of the difference of two fields sharing a grid.
    pub fn sup_distance(&self, other: &DriftField) -> Result<f64> {
        if self.times != other.times || self.grid != other.grid {
            return Err(Error::GridMismatch(
                "sup_distance requires identical grids".into(),
            ));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.values.chunks(self.dim).zip(other.values.chunks(self.dim)) {
            let mut acc = 0.0;
            for k in 0..self.dim {
                let dv = a[k] - b[k];
                acc += dv * dv;
            }
            worst = worst.max(acc.sqrt());
        }
        Ok(worst)
    }

    fn time_index(&self, t: f64) -> Result<usize> {
        let lo = self.times[0];
        let hi = *self.times.last().unwrap();
        let slack = 1e-12 * (1.0 + hi.abs());
        if t < lo - slack || t > hi + slack {
            return Err(Error::OutsideHorizon { t, lo, hi });
        }
        // left node: last index with times[i] <= t
        let mut idx = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        if idx >= self.times.len() {
            idx = self.times.len() - 1;
        }
        Ok(idx)
    }

    /// Evaluate the field: piecewise-constant in time (left node),
    /// multilinear in space, clamped to the boundary outside the box.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, x, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let ti = self.time_index(t)?;
        let d = self.dim;
        let nodes = &self.grid.nodes;

        // per-axis cell index and interpolation fraction, clamped
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        debug_assert!(d <= 8, "dimension capped at 8");
        for axis in 0..d {
            let n = nodes[axis];
            if n == 1 {
                base[axis] = 0;
                frac[axis] = 0.0;
                continue;
            }
            let span = self.grid.hi[axis] - self.grid.lo[axis];
            let u = ((x[axis] - self.grid.lo[axis]) / span) * ((n - 1) as f64);
            let u = u.clamp(0.0, (n - 1) as f64);
            let mut i0 = u.floor() as usize;
            if i0 >= n - 1 {
                i0 = n - 2;
            }
            base[axis] = i0;
            frac[axis] = u - i0 as f64;
        }

        out.fill(0.0);
        let t_off = ti * self.grid.node_count() * d;
        // accumulate the 2^d corner contributions
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut node = 0usize;
            for axis in 0..d {
                let n = nodes[axis];
                let hi_side = (corner >> axis) & 1 == 1;
                let (i, w) = if n == 1 {
                    (0, if hi_side { 0.0 } else { 1.0 })
                } else if hi_side {
                    (base[axis] + 1, frac[axis])
                } else {
                    (base[axis], 1.0 - frac[axis])
                };
                weight *= w;
                node = node * n + i;
            }
            if weight == 0.0 {
                continue;
            }
            let off = t_off + node * d;
            for k in 0..d {
                out[k] += weight * self.values[off + k];
            }
        }
        Ok(())
    }
}

/// A set of simulated trajectories with the increments needed to reweight
/// them later.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    dim: usize,
    n_paths: usize,
    n_starts: usize,
    paths_per_start: usize,
    times: Vec<f64>,
    dt: f64,
    seed: u64,
    zero_drift: bool,
    drift_sup: f64,
    /// `[path][node][dim]`
    positions: Vec<f64>,
    /// `[path][step][dim]`
    brownian: Vec<f64>,
    /// `[path][step][dim]`, `dM = sigma dB`
    martingale: Vec<f64>,
    starts: Vec<f64>,
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_starts(&self) -> usize {
        self.n_starts
    }

    pub fn paths_per_start(&self) -> usize {
        self.paths_per_start
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn zero_drift(&self) -> bool {
        self.zero_drift
    }

    pub fn drift_sup(&self) -> f64 {
        self.drift_sup
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index of the start point that seeded this path.
    pub fn start_index(&self, path: usize) -> usize {
        path / self.paths_per_start
    }

    pub fn start(&self, path: usize) -> &[f64] {
        let off = path * self.dim;
        &self.starts[off..off + self.dim]
    }

    pub fn position(&self, path: usize, node: usize) -> &[f64] {
        let off = (path * self.times.len() + node) * self.dim;
        &self.positions[off..off + self.dim]
    }

    pub fn brownian_increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.times.len() - 1) + step) * self.dim;
        &self.brownian[off..off + self.dim]
    }

    pub fn martingale_increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.times.len() - 1) + step) * self.dim;
        &self.martingale[off..off + self.dim]
    }

    /// Node index of time `t`, if `t` sits on the grid.
    pub fn node_of_time(&self, t: f64) -> Result<usize> {
        let tol = 1e-9 * (1.0 + self.horizon());
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= tol)
            .ok_or_else(|| Error::GridMismatch(format!("t={t} is not an ensemble node")))
    }
}

/// Simulate Euler-Maruyama trajectories of `dX = b dt + sigma dB`.
///
/// One path is generated per `(start, replicate)` pair; its noise stream
/// is keyed by `(seed, start index, replicate index)`, so path-level
/// parallelism cannot change the output. Passing `None` for the drift
/// simulates the driftless diffusion.
pub fn simulate_paths(
    spec: &DiffusionSpec,
    drift: Option<&DriftField>,
    starts: &[Vec<f64>],
    horizon: f64,
    steps: usize,
    paths_per_start: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let d = spec.dim();
    if starts.is_empty() || paths_per_start == 0 {
        return Err(Error::InvalidSpec("need at least one path".into()));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter {
            name: "horizon",
            value: horizon,
            constraint: "> 0",
        });
    }
    if steps == 0 {
        return Err(Error::InvalidParameter {
            name: "steps",
            value: 0.0,
            constraint: ">= 1",
        });
    }
    if let Some(b) = drift {
        if b.dim() != d {
            return Err(Error::GridMismatch("drift dimension mismatch".into()));
        }
        let slack = 1e-12 * (1.0 + horizon);
        if b.horizon() + slack < horizon {
            return Err(Error::GridMismatch(format!(
                "drift horizon {} does not cover simulation horizon {}",
                b.horizon(),
                horizon
            )));
        }
        if !b.sup_norm().is_finite() {
            return Err(Error::InvalidSpec("drift sup-norm must be finite".into()));
        }
    }
    for s in starts {
        if s.len() != d {
            return Err(Error::GridMismatch("start point dimension mismatch".into()));
        }
    }

    let n_paths = starts.len() * paths_per_start;
    let n_nodes = steps + 1;
    let dt = horizon / steps as f64;
    let times: Vec<f64> = (0..n_nodes).map(|k| k as f64 * dt).collect();

    let mut positions = vec![0.0; n_paths * n_nodes * d];
    let mut brownian = vec![0.0; n_paths * steps * d];
    let mut martingale = vec![0.0; n_paths * steps * d];
    let mut start_buf = vec![0.0; n_paths * d];

    let errors: Vec<Option<Error>> = positions
        .par_chunks_mut(n_nodes * d)
        .zip(brownian.par_chunks_mut(steps * d))
        .zip(martingale.par_chunks_mut(steps * d))
        .zip(start_buf.par_chunks_mut(d))
        .enumerate()
        .map(|(path, (((pos, bro), mart), sb))| {
            let start_idx = path / paths_per_start;
            let rep_idx = path % paths_per_start;
            let mut rng = stream(seed, Role::Path, start_idx as u64, rep_idx as u64);
            let start = &starts[start_idx];
            sb.copy_from_slice(start);
            pos[0..d].copy_from_slice(start);

            let mut x = start.clone();
            let mut sigma = vec![0.0; d * d];
            let mut b_val = vec![0.0; d];
            let mut dm = vec![0.0; d];
            let mut db = vec![0.0; d];

            for k in 0..steps {
                let t_k = times[k];
                if let Some(b) = drift {
                    if let Err(e) = b.eval_into(t_k, &x, &mut b_val) {
                        return Some(e);
                    }
                } else {
                    b_val.fill(0.0);
                }
                for dbi in db.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *dbi = z * dt.sqrt();
                }
                spec.sigma_into(t_k, &x, &mut sigma);
                linalg::matvec(&sigma, &db, &mut dm);
                for i in 0..d {
                    x[i] += b_val[i] * dt + dm[i];
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Some(Error::NonFinite {
                        context: "simulate_paths",
                        path,
                        step: k,
                    });
                }
                bro[k * d..(k + 1) * d].copy_from_slice(&db);
                mart[k * d..(k + 1) * d].copy_from_slice(&dm);
                pos[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
            }
            None
        })
        .collect();

    if let Some(e) = errors.into_iter().flatten().next() {
        return Err(e);
    }

    Ok(PathEnsemble {
        dim: d,
        n_paths,
        n_starts: starts.len(),
        paths_per_start,
        times,
        dt,
        seed,
        zero_drift: drift.is_none(),
        drift_sup: drift.map(|b| b.sup_norm()).unwrap_or(0.0),
        positions,
        brownian,
        martingale,
        starts: start_buf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn g_inner_identity() {
        let spec = DiffusionSpec::identity(2);
        let v = spec.g_inner(0.0, &[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_relative_eq!(v, 1.0);
    }

    #[test]
    fn g_inner_scaled() {
        let spec = DiffusionSpec::scaled_identity(2, 2.0).unwrap();
        let v = spec.g_inner(0.0, &[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_relative_eq!(v, 0.25, epsilon = 1e-14);
    }

    #[test]
    fn g_inner_diag_oracle() {
        // sigma = diag(1, 2): g = diag(1, 4), ginv = diag(1, 1/4)
        let spec = DiffusionSpec::diag_const(vec![1.0, 2.0]).unwrap();
        let v = spec
            .g_inner(0.0, &[0.0, 0.0], &[1.0, 1.0], &[1.0, -1.0])
            .unwrap();
        assert_relative_eq!(v, 0.75, epsilon = 1e-14);
        // symmetry
        let w = spec
            .g_inner(0.0, &[0.0, 0.0], &[1.0, -1.0], &[1.0, 1.0])
            .unwrap();
        assert_relative_eq!(v, w, epsilon = 1e-14);
    }

    #[test]
    fn g_inner_lower_bound() {
        // <a,a>_g >= |a|^2 / xi for random specs and vectors
        use rand::Rng;
        let mut rng = crate::rng::stream(3, Role::Probe, 2, 0);
        let specs = vec![
            DiffusionSpec::identity(2),
            DiffusionSpec::scaled_identity(2, 0.7).unwrap(),
            DiffusionSpec::diag_sin(2, 0.5).unwrap(),
        ];
        for spec in &specs {
            for _ in 0..200 {
                let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                let a = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let q = spec.g_inner(0.1, &x, &a, &a).unwrap();
                let n2 = a[0] * a[0] + a[1] * a[1];
                assert!(q >= n2 / spec.xi() - 1e-10, "q={q}, |a|^2={n2}");
            }
        }
    }

    #[test]
    fn g_inner_rejects_degenerate_metric() {
        // a rank-deficient sigma makes the metric singular
        let spec = DiffusionSpec::custom(2, 1.0, |_t, _x, out| {
            out.copy_from_slice(&[1.0, 0.0, 1.0, 0.0]);
        })
        .unwrap();
        let err = spec.g_inner(0.0, &[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]);
        assert!(matches!(err, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn grad_g_examples() {
        let id = DiffusionSpec::identity(2);
        assert_eq!(id.grad_g(0.0, &[0.0, 0.0], &[0.3, -0.4]), vec![0.3, -0.4]);
        let dg = DiffusionSpec::diag_const(vec![1.0, 2.0]).unwrap();
        let v = dg.grad_g(0.0, &[0.0, 0.0], &[1.0, 1.0]);
        assert_relative_eq!(v[0], 1.0);
        assert_relative_eq!(v[1], 4.0);
    }

    #[test]
    fn grad_g_random_matches_oracle() {
        use nalgebra::{DMatrix, DVector};
        use rand::Rng;
        let mut rng = crate::rng::stream(5, Role::Probe, 3, 0);
        let spec = DiffusionSpec::diag_sin(2, 0.4).unwrap();
        for _ in 0..50 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let got = spec.grad_g(0.2, &x, &v);
            let mut g = vec![0.0; 4];
            spec.metric_into(0.2, &x, &mut g);
            let gm = DMatrix::from_row_slice(2, 2, &g);
            let expect = gm * DVector::from_row_slice(&v);
            assert_relative_eq!(got[0], expect[0], epsilon = 1e-12);
            assert_relative_eq!(got[1], expect[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn ellipticity_of_builtins() {
        for spec in [
            DiffusionSpec::identity(2),
            DiffusionSpec::scaled_identity(2, 2.0_f64.sqrt()).unwrap(),
            DiffusionSpec::diag_const(vec![1.0, 2.0]).unwrap(),
            DiffusionSpec::diag_sin(2, 0.5).unwrap(),
            DiffusionSpec::diag_sin(3, 0.3).unwrap(),
        ] {
            spec.check_ellipticity(2000, 5.0, 17).unwrap();
        }
    }

    #[test]
    fn ellipticity_check_catches_violations() {
        // claim xi = 1 for a spec that actually needs xi = 4
        let spec = DiffusionSpec::custom(2, 1.0, |_t, x, out| {
            out.copy_from_slice(&[1.0 + 0.5 * x[1].sin(), 0.0, 0.0, 1.0]);
        })
        .unwrap();
        assert!(spec.check_ellipticity(2000, 5.0, 17).is_err());
    }

    #[test]
    fn drift_field_constant_and_nodes() {
        let f = DriftField::constant(vec![0.5, -1.5], 1.0, 2.0).unwrap();
        assert_relative_eq!(f.sup_norm(), (0.25f64 + 2.25).sqrt());
        let v = f.eval(0.3, &[10.0, -4.0]).unwrap(); // clamped outside the box
        assert_relative_eq!(v[0], 0.5);
        assert_relative_eq!(v[1], -1.5);
    }

    #[test]
    fn drift_field_node_exact_and_center_average() {
        let grid = SpaceGrid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 3]).unwrap();
        let f = DriftField::from_fn(vec![0.0, 1.0], grid, |_t, x| vec![x[0] + 2.0 * x[1], 0.0])
            .unwrap();
        // exactly at a node
        let v = f.eval(0.0, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(v[0], 1.5, epsilon = 1e-14);
        // at a cell center: multilinear interpolation of a linear function
        // is exact, so it equals the corner average
        let v = f.eval(0.0, &[0.25, 0.75]).unwrap();
        assert_relative_eq!(v[0], 0.25 + 1.5, epsilon = 1e-14);
    }

    #[test]
    fn drift_field_interp_bounded_by_sup() {
        use rand::Rng;
        let grid = SpaceGrid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![5, 4]).unwrap();
        let f = DriftField::from_fn(vec![0.0, 0.5, 1.0], grid, |t, x| {
            vec![(3.0 * x[0] + t).sin(), (2.0 * x[1]).cos()]
        })
        .unwrap();
        let mut rng = crate::rng::stream(23, Role::Probe, 4, 0);
        for _ in 0..500 {
            let t = rng.gen_range(0.0..1.0);
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let v = f.eval(t, &x).unwrap();
            assert!(linalg::norm(&v) <= f.sup_norm() + 1e-12);
        }
    }

    #[test]
    fn drift_field_rejects_time_outside() {
        let f = DriftField::constant(vec![1.0, 0.0], 0.5, 1.0).unwrap();
        assert!(f.eval(0.7, &[0.0, 0.0]).is_err());
        assert!(f.eval(-0.1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn piecewise_constant_in_time_left_node() {
        let grid = SpaceGrid::new(vec![-1.0], vec![1.0], vec![2]).unwrap();
        let f = DriftField::from_fn(vec![0.0, 0.5, 1.0], grid, |t, _| vec![t]).unwrap();
        assert_relative_eq!(f.eval(0.49, &[0.0]).unwrap()[0], 0.0);
        assert_relative_eq!(f.eval(0.5, &[0.0]).unwrap()[0], 0.5);
        assert_relative_eq!(f.eval(0.99, &[0.0]).unwrap()[0], 0.5);
        assert_relative_eq!(f.eval(1.0, &[0.0]).unwrap()[0], 1.0);
    }

    #[test]
    fn simulation_is_reproducible() {
        let spec = DiffusionSpec::diag_sin(2, 0.5).unwrap();
        let starts = vec![vec![0.0, 0.0], vec![1.0, -1.0]];
        let a = simulate_paths(&spec, None, &starts, 0.5, 16, 8, 42).unwrap();
        let b = simulate_paths(&spec, None, &starts, 0.5, 16, 8, 42).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.brownian, b.brownian);
        assert_eq!(a.martingale, b.martingale);
        let c = simulate_paths(&spec, None, &starts, 0.5, 16, 8, 43).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn martingale_increment_consistency() {
        // dM must equal sigma(t_k, X_k) dB_k, recomputed after the fact
        let spec = DiffusionSpec::diag_sin(2, 0.5).unwrap();
        let ens = simulate_paths(&spec, None, &[vec![0.2, 0.1]], 0.5, 8, 4, 7).unwrap();
        let mut sigma = vec![0.0; 4];
        let mut dm = vec![0.0; 2];
        for path in 0..ens.n_paths() {
            for k in 0..ens.steps() {
                let x = ens.position(path, k);
                spec.sigma_into(ens.times()[k], x, &mut sigma);
                linalg::matvec(&sigma, ens.brownian_increment(path, k), &mut dm);
                let stored = ens.martingale_increment(path, k);
                assert_eq!(stored, &dm[..], "path {path} step {k}");
            }
        }
    }

    #[test]
    fn brownian_moments() {
        let spec = DiffusionSpec::identity(2);
        let start = vec![vec![0.5, -0.5]];
        let n = 100_000;
        let ens = simulate_paths(&spec, None, &start, 0.5, 8, n, 1234).unwrap();
        let t = 0.5;
        let node = ens.node_of_time(t).unwrap();
        let mut mean = [0.0f64; 2];
        let mut m2 = [0.0f64; 2];
        for p in 0..n {
            let x = ens.position(p, node);
            mean[0] += x[0];
            mean[1] += x[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for p in 0..n {
            let x = ens.position(p, node);
            m2[0] += (x[0] - mean[0]).powi(2);
            m2[1] += (x[1] - mean[1]).powi(2);
        }
        m2[0] /= (n - 1) as f64;
        m2[1] /= (n - 1) as f64;
        let se_mean = (t / n as f64).sqrt();
        assert!((mean[0] - 0.5).abs() < 4.0 * se_mean, "mean {mean:?}");
        assert!((mean[1] + 0.5).abs() < 4.0 * se_mean, "mean {mean:?}");
        let se_var = t * (2.0 / n as f64).sqrt();
        assert!((m2[0] - t).abs() < 4.0 * se_var, "var {m2:?}");
        assert!((m2[1] - t).abs() < 4.0 * se_var, "var {m2:?}");
    }

    #[test]
    fn drifted_mean() {
        let spec = DiffusionSpec::identity(2);
        let v = vec![1.0, -2.0];
        let b = DriftField::constant(v.clone(), 0.5, 1.0).unwrap();
        let n = 50_000;
        let ens = simulate_paths(&spec, Some(&b), &[vec![0.0, 0.0]], 0.5, 16, n, 5).unwrap();
        let node = ens.node_of_time(0.5).unwrap();
        let mut mean = [0.0f64; 2];
        for p in 0..n {
            let x = ens.position(p, node);
            mean[0] += x[0];
            mean[1] += x[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        let se = (0.5 / n as f64).sqrt();
        assert!((mean[0] - 0.5).abs() < 4.0 * se);
        assert!((mean[1] + 1.0).abs() < 4.0 * se);
    }

    #[test]
    fn multiplicative_self_convergence() {
        // weak order 1: |m(h) - m(h/8)| <= 1.75 |m(h) - m(h/2)| + 4 se
        let spec = DiffusionSpec::diag_sin(2, 0.5).unwrap();
        let n = 200_000;
        let t = 0.5;
        let start = vec![vec![0.3, 0.7]];
        let run = |steps: usize| -> ([f64; 2], [f64; 2]) {
            let ens = simulate_paths(&spec, None, &start, t, steps, n, 99).unwrap();
            let node = ens.node_of_time(t).unwrap();
            let (mut m1, mut m2) = ([0.0f64; 2], [0.0f64; 2]);
            for p in 0..n {
                let x = ens.position(p, node);
                m1[0] += x[0];
                m1[1] += x[1];
                m2[0] += x[0] * x[0];
                m2[1] += x[1] * x[1];
            }
            for k in 0..2 {
                m1[k] /= n as f64;
                m2[k] /= n as f64;
            }
            (m1, m2)
        };
        let (a1, a2) = run(8);
        let (b1, b2) = run(16);
        let (c1, c2) = run(64);
        // crude se of the second moment of the first coordinate
        let se = (3.0f64 * 2.25 * t * t / n as f64).sqrt();
        for k in 0..2 {
            let d_half = (a1[k] - b1[k]).abs();
            let d_full = (a1[k] - c1[k]).abs();
            assert!(d_full <= 1.75 * d_half + 4.0 * se, "first moment axis {k}");
            let d_half = (a2[k] - b2[k]).abs();
            let d_full = (a2[k] - c2[k]).abs();
            assert!(d_full <= 1.75 * d_half + 4.0 * se, "second moment axis {k}");
        }
    }

    #[test]
    fn ks_distance_shrinks_with_steps() {
        // sigma = I, b = 0: marginals are exactly Gaussian, so the KS
        // statistic is pure Monte Carlo noise at every step count and any
        // increase stays within the sampling allowance.
        let spec = DiffusionSpec::identity(1);
        let n = 40_000;
        let t = 1.0;
        let ks = |steps: usize| -> f64 {
            let ens = simulate_paths(&spec, None, &[vec![0.0]], t, steps, n, 2024 + steps as u64)
                .unwrap();
            let node = ens.node_of_time(t).unwrap();
            let mut xs: Vec<f64> = (0..n).map(|p| ens.position(p, node)[0]).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            crate::stats::ks_statistic_gaussian(&xs, 0.0, t.sqrt())
        };
        let (k8, k32, k128) = (ks(8), ks(32), ks(128));
        let allow = 3.0 / (n as f64).sqrt();
        assert!(k32 <= k8 + allow, "k8={k8}, k32={k32}");
        assert!(k128 <= k32 + allow, "k32={k32}, k128={k128}");
    }

    #[test]
    fn horizon_beyond_drift_rejected() {
        let spec = DiffusionSpec::identity(2);
        let b = DriftField::constant(vec![1.0, 0.0], 0.25, 1.0).unwrap();
        let err = simulate_paths(&spec, Some(&b), &[vec![0.0, 0.0]], 0.5, 8, 1, 1);
        assert!(matches!(err, Err(Error::GridMismatch(_))));
    }

    #[test]
    fn overflow_aborts_with_diagnostics() {
        // a violently amplifying custom coefficient blows the state up
        let spec = DiffusionSpec::custom(2, 1.0, |_t, x, out| {
            let s = 1e200 * (1.0 + x[0].abs());
            out.copy_from_slice(&[s, 0.0, 0.0, s]);
        })
        .unwrap();
        let err = simulate_paths(&spec, None, &[vec![0.0, 0.0]], 1.0, 8, 4, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "got {err:?}");
    }
}
