//! The interacting N-vortex system with per-particle multiplicative noise.
//!
//! Each vortex `i` carries a fixed signed intensity and moves by
//!
//! ```text
//! dX^i = (1/N) sum_{j != i} w^j K(X^i - X^j) e_1 dt + sigma(t, X^i) dB^i
//! ```
//!
//! with independent Brownian motions per vortex. Intensities are the
//! importance weights `w_1(y_i) / proposal(y_i)` of the initial draw, so
//! the signed empirical measure approximates the first-component
//! vorticity. Near-collisions use the kernel's clamped evaluation and are
//! tallied.
//!
//! Drift summation is pairwise `O(N^2)` with a read-only position
//! snapshot, parallel over targets; noise is keyed by
//! `(seed, vortex, step)` so stepping is deterministic under any thread
//! schedule. No tree or multipole acceleration at desk scale; the drift
//! loop is the internal interface a faster summation would replace.

use crate::diffusion::{DiffusionSpec, DriftField};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg;
use crate::meanfield::VorticitySpec;
use crate::rng::{stream, Role};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

/// State of the N-vortex system.
#[derive(Clone, Debug)]
pub struct VortexEnsemble {
    dim: usize,
    n: usize,
    positions: Vec<f64>,
    intensities: Vec<f64>,
    time: f64,
    steps_taken: usize,
    seed: u64,
    epsilon: f64,
    clamp_tally: usize,
}

impl VortexEnsemble {
    /// Sample `n` vortices from the vorticity's proposal; intensities are
    /// the first-component importance weights.
    pub fn init_from_vorticity(
        w: &VorticitySpec,
        n: usize,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter {
                name: "n",
                value: 0.0,
                constraint: ">= 1",
            });
        }
        let vol = w.box_volume();
        if !(vol > 0.0 && vol.is_finite()) {
            return Err(Error::Proposal("support box volume degenerate".into()));
        }
        let d = w.dim();
        let mut positions = vec![0.0; n * d];
        let mut intensities = vec![0.0; n];
        for i in 0..n {
            let mut rng = stream(seed, Role::Init, i as u64, 0);
            let y = w.sample_point(&mut rng);
            positions[i * d..(i + 1) * d].copy_from_slice(&y);
            intensities[i] = w.eval(&y)[0] * vol;
        }
        Ok(Self {
            dim: d,
            n,
            positions,
            intensities,
            time: 0.0,
            steps_taken: 0,
            seed,
            epsilon,
            clamp_tally: 0,
        })
    }

    /// Explicit configuration (test scenarios, e.g. two vortices).
    pub fn from_points(
        positions: Vec<Vec<f64>>,
        intensities: Vec<f64>,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        if positions.is_empty() || positions.len() != intensities.len() {
            return Err(Error::InvalidSpec(
                "positions and intensities must match and be nonempty".into(),
            ));
        }
        let d = positions[0].len();
        let mut flat = Vec::with_capacity(positions.len() * d);
        for p in &positions {
            if p.len() != d {
                return Err(Error::GridMismatch("vortex dimension mismatch".into()));
            }
            flat.extend_from_slice(p);
        }
        Ok(Self {
            dim: d,
            n: positions.len(),
            positions: flat,
            intensities,
            time: 0.0,
            steps_taken: 0,
            seed,
            epsilon,
            clamp_tally: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }

    /// Clamped kernel evaluations seen so far.
    pub fn clamp_tally(&self) -> usize {
        self.clamp_tally
    }

    /// One Euler-Maruyama step of the interacting system.
    pub fn step(mut self, dt: f64, spec: &DiffusionSpec, kernel: &KernelSpec) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                value: dt,
                constraint: "> 0",
            });
        }
        let d = self.dim;
        if spec.dim() != d || kernel.dim() != d {
            return Err(Error::GridMismatch("dimension mismatch".into()));
        }
        let kernel = kernel.clone().with_epsilon(self.epsilon);
        let n = self.n;
        let nf = n as f64;
        let snapshot = self.positions.clone();
        let intensities = &self.intensities;
        let t = self.time;
        let step_idx = self.steps_taken as u64;
        let seed = self.seed;

        let mut next = vec![0.0; n * d];
        let clamps: usize = next
            .par_chunks_mut(d)
            .enumerate()
            .map(|(i, out)| {
                let xi = &snapshot[i * d..(i + 1) * d];
                let mut drift = vec![0.0; d];
                let mut u = vec![0.0; d];
                let mut kv = vec![0.0; d];
                let mut wv = vec![0.0; d];
                let mut clamped = 0usize;
                for j in 0..n {
                    if j == i || intensities[j] == 0.0 {
                        continue;
                    }
                    let xj = &snapshot[j * d..(j + 1) * d];
                    for k in 0..d {
                        u[k] = xi[k] - xj[k];
                    }
                    wv.fill(0.0);
                    wv[0] = intensities[j];
                    if kernel.apply_regularized(&u, &wv, &mut kv) {
                        clamped += 1;
                    }
                    for k in 0..d {
                        drift[k] += kv[k];
                    }
                }
                // noise stream keyed by (seed, vortex, step)
                let mut rng = stream(seed, Role::Particle, i as u64, step_idx);
                let mut db = vec![0.0; d];
                for dbk in db.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *dbk = z * dt.sqrt();
                }
                let mut sigma = vec![0.0; d * d];
                spec.sigma_into(t, xi, &mut sigma);
                let mut dm = vec![0.0; d];
                linalg::matvec(&sigma, &db, &mut dm);
                for k in 0..d {
                    out[k] = xi[k] + drift[k] / nf * dt + dm[k];
                }
                clamped
            })
            .sum();

        if let Some(bad) = next.chunks(d).position(|p| p.iter().any(|v| !v.is_finite())) {
            // report the closest pair distance for the offending vortex
            let xi = &snapshot[bad * d..(bad + 1) * d];
            let closest = (0..n)
                .filter(|&j| j != bad)
                .map(|j| linalg::dist(xi, &snapshot[j * d..(j + 1) * d]))
                .fold(f64::INFINITY, f64::min);
            return Err(Error::InvalidSpec(format!(
                "non-finite vortex {bad} after step {}; closest pair distance {closest:.3e}",
                self.steps_taken
            )));
        }

        self.positions = next;
        self.time += dt;
        self.steps_taken += 1;
        self.clamp_tally += clamps;
        Ok(self)
    }

    /// Advance by `steps` equal steps to time `time + steps * dt`.
    pub fn run(mut self, dt: f64, steps: usize, spec: &DiffusionSpec, kernel: &KernelSpec) -> Result<Self> {
        for _ in 0..steps {
            self = self.step(dt, spec, kernel)?;
        }
        Ok(self)
    }

    /// Empirical velocity field `(1/N) sum_j w^j K(x - X^j) e_1` at an
    /// evaluation point (all vortices contribute; near-hits are clamped
    /// and counted).
    pub fn empirical_velocity(&self, kernel: &KernelSpec, x: &[f64]) -> (Vec<f64>, usize) {
        let d = self.dim;
        let kernel = kernel.clone().with_epsilon(self.epsilon);
        let mut vel = vec![0.0; d];
        let mut u = vec![0.0; d];
        let mut kv = vec![0.0; d];
        let mut wv = vec![0.0; d];
        let mut clamps = 0usize;
        for j in 0..self.n {
            if self.intensities[j] == 0.0 {
                continue;
            }
            let xj = self.position(j);
            for k in 0..d {
                u[k] = x[k] - xj[k];
            }
            wv.fill(0.0);
            wv[0] = self.intensities[j];
            if kernel.apply_regularized(&u, &wv, &mut kv) {
                clamps += 1;
            }
            for k in 0..d {
                vel[k] += kv[k];
            }
        }
        for v in vel.iter_mut() {
            *v /= self.n as f64;
        }
        (vel, clamps)
    }
}

/// Per-N row of a mean-field convergence table.
#[derive(Clone, Debug, Serialize)]
pub struct ChaosRow {
    pub n: usize,
    pub replicas: usize,
    pub mean_err: f64,
    pub mean_err_se: f64,
    pub max_err: f64,
    pub max_err_se: f64,
}

/// Measure the deviation of the empirical velocity from a reference drift
/// field over a probe grid, for a ladder of ensemble sizes, averaged over
/// independent replicas.
#[allow(clippy::too_many_arguments)]
pub fn chaos_error(
    ns: &[usize],
    replicas: usize,
    w: &VorticitySpec,
    kernel: &KernelSpec,
    spec: &DiffusionSpec,
    epsilon: f64,
    t: f64,
    steps: usize,
    reference: &DriftField,
    probes: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<ChaosRow>> {
    if reference.dim() != spec.dim() {
        return Err(Error::GridMismatch("reference dimension mismatch".into()));
    }
    let slack = 1e-9 * (1.0 + t);
    if reference.horizon() + slack < t {
        return Err(Error::GridMismatch(format!(
            "reference horizon {} does not cover evaluation time {}",
            reference.horizon(),
            t
        )));
    }
    if probes.is_empty() || replicas == 0 {
        return Err(Error::InvalidSpec("need probes and replicas".into()));
    }
    let dt = t / steps.max(1) as f64;
    let mut rows = Vec::with_capacity(ns.len());
    for (ni, &n) in ns.iter().enumerate() {
        let per_replica: Vec<(f64, f64)> = (0..replicas)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = seed
                    .wrapping_add((ni as u64) << 40)
                    .wrapping_add(rep as u64 + 1);
                let mut ens = VortexEnsemble::init_from_vorticity(w, n, epsilon, rep_seed)
                    .expect("init");
                if steps > 0 {
                    ens = ens.run(dt, steps, spec, kernel).expect("step");
                }
                let mut sum = 0.0;
                let mut worst = 0.0f64;
                for p in probes {
                    let (vel, _) = ens.empirical_velocity(kernel, p);
                    let refv = reference.eval(t, p).expect("reference eval");
                    let err = linalg::dist(&vel, &refv);
                    sum += err;
                    worst = worst.max(err);
                }
                (sum / probes.len() as f64, worst)
            })
            .collect();
        let means: Vec<f64> = per_replica.iter().map(|r| r.0).collect();
        let maxes: Vec<f64> = per_replica.iter().map(|r| r.1).collect();
        let (mean_err, mean_err_se) = crate::stats::mean_se(&means);
        let (max_err, max_err_se) = crate::stats::mean_se(&maxes);
        rows.push(ChaosRow {
            n,
            replicas,
            mean_err,
            mean_err_se,
            max_err,
            max_err_se,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log err` against `log N`.
pub fn loglog_slope(rows: &[ChaosRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.mean_err.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
