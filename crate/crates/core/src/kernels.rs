//! Singular interaction kernels with power-law envelopes.
//!
//! A kernel is a matrix-valued map `K : R^d \ {0} -> R^{d x d}` whose
//! operator norm is dominated by `alpha / |x|^gamma` with `gamma in [0, d)`.
//! The Biot-Savart kernel is carried as a `2 x 2` matrix whose first column
//! is `(-x_2, x_1) / (2 pi |x|^2)` and whose second column vanishes, so
//! that `K(x - y) . (W(y), 0)` reproduces the velocity-from-vorticity
//! action while fitting the matrix interface. Scalar vorticity therefore
//! lives in the first component of the vector it acts on.
//!
//! Points inside the regularization radius `epsilon` are a hard error for
//! plain evaluation; the `*_regularized` variants clamp the argument to
//! norm `epsilon` instead and report the clamp, which is the rule particle
//! simulations use near collisions.

use crate::error::{Error, Result};
use crate::linalg;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Radii below this are treated as the singular point itself even when no
/// regularization is configured, so `1/|x|^gamma` cannot overflow.
pub const MIN_RADIUS: f64 = 1e-150;

type KernelFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum Rule {
    /// `alpha / |x|^gamma . I`
    PowerLaw,
    /// 2D velocity-from-vorticity kernel.
    BiotSavart,
    /// User-supplied evaluation writing a row-major `d x d` matrix.
    Custom(KernelFn),
}

impl fmt::Debug for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::PowerLaw => write!(f, "PowerLaw"),
            Rule::BiotSavart => write!(f, "BiotSavart"),
            Rule::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A singular kernel together with its envelope parameters.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    dim: usize,
    alpha: f64,
    gamma: f64,
    epsilon: f64,
    rule: Rule,
}

impl KernelSpec {
    /// Scaled-identity kernel `K(x) = alpha / |x|^gamma . I`. With
    /// `gamma = 0` this is the constant kernel `alpha . I`; with
    /// `alpha = 0` the zero kernel.
    pub fn power_law(dim: usize, alpha: f64, gamma: f64, epsilon: f64) -> Result<Self> {
        Self::validate(dim, alpha, gamma, epsilon)?;
        Ok(Self {
            dim,
            alpha,
            gamma,
            epsilon,
            rule: Rule::PowerLaw,
        })
    }

    /// The 2D Biot-Savart kernel; envelope `1 / (2 pi |x|)`.
    pub fn biot_savart(epsilon: f64) -> Self {
        Self {
            dim: 2,
            alpha: 1.0 / (2.0 * PI),
            gamma: 1.0,
            epsilon,
            rule: Rule::BiotSavart,
        }
    }

    /// Kernel with a caller-provided evaluation rule. The envelope
    /// `alpha / |x|^gamma` is a contract on the rule; use
    /// [`KernelSpec::check_envelope`] to spot-check it.
    pub fn custom(
        dim: usize,
        alpha: f64,
        gamma: f64,
        epsilon: f64,
        rule: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::validate(dim, alpha, gamma, epsilon)?;
        Ok(Self {
            dim,
            alpha,
            gamma,
            epsilon,
            rule: Rule::Custom(Arc::new(rule)),
        })
    }

    fn validate(dim: usize, alpha: f64, gamma: f64, epsilon: f64) -> Result<()> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                value: dim as f64,
                constraint: "dim >= 1",
            });
        }
        if !(alpha >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                constraint: "alpha >= 0",
            });
        }
        if !(0.0..dim as f64).contains(&gamma) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                value: gamma,
                constraint: "0 <= gamma < d",
            });
        }
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                value: epsilon,
                constraint: "epsilon >= 0",
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Replace the regularization radius (used when a cutoff radius `R`
    /// fixes the default `epsilon = 1e-8 R`).
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn singular_limit(&self) -> f64 {
        self.epsilon.max(MIN_RADIUS)
    }

    fn check_radius(&self, x: &[f64]) -> Result<f64> {
        let r = linalg::norm(x);
        let limit = self.singular_limit();
        if r < limit {
            return Err(Error::Singular { radius: r, limit });
        }
        Ok(r)
    }

    fn eval_unchecked(&self, x: &[f64], r: f64, out: &mut [f64]) {
        match &self.rule {
            Rule::PowerLaw => {
                out.fill(0.0);
                let s = self.alpha / r.powf(self.gamma);
                for i in 0..self.dim {
                    out[i * self.dim + i] = s;
                }
            }
            Rule::BiotSavart => {
                let c = 1.0 / (2.0 * PI * r * r);
                // first column (-x2, x1)/(2 pi |x|^2), second column zero
                out[0] = -x[1] * c;
                out[1] = 0.0;
                out[2] = x[0] * c;
                out[3] = 0.0;
            }
            Rule::Custom(f) => f(x, out),
        }
    }

    /// Evaluate `K(x)` into a row-major `d x d` slice.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.check_radius(x)?;
        self.eval_unchecked(x, r, out);
        Ok(())
    }

    /// Evaluate `K(x)` as a freshly allocated matrix.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// `K(x) . v` without materializing the matrix.
    pub fn apply(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.check_radius(x)?;
        self.apply_unchecked(x, r, v, out);
        Ok(())
    }

    fn apply_unchecked(&self, x: &[f64], r: f64, v: &[f64], out: &mut [f64]) {
        match &self.rule {
            Rule::PowerLaw => {
                let s = self.alpha / r.powf(self.gamma);
                for i in 0..self.dim {
                    out[i] = s * v[i];
                }
            }
            Rule::BiotSavart => {
                let c = v[0] / (2.0 * PI * r * r);
                out[0] = -x[1] * c;
                out[1] = x[0] * c;
            }
            Rule::Custom(f) => {
                let mut m = vec![0.0; self.dim * self.dim];
                f(x, &mut m);
                linalg::matvec(&m, v, out);
            }
        }
    }

    /// `K(x) . v` with the argument clamped to norm `epsilon` when it falls
    /// inside the regularized core. Returns whether the clamp fired; the
    /// exact origin is clamped to `epsilon . e_1`.
    pub fn apply_regularized(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        let r = linalg::norm(x);
        let limit = self.singular_limit();
        if r >= limit {
            self.apply_unchecked(x, r, v, out);
            return false;
        }
        let mut clamped = vec![0.0; self.dim];
        if r < MIN_RADIUS {
            clamped[0] = limit;
        } else {
            let s = limit / r;
            for (c, xi) in clamped.iter_mut().zip(x) {
                *c = xi * s;
            }
        }
        self.apply_unchecked(&clamped, limit, v, out);
        true
    }

    /// Operator norm of `K(x)`, with the same clamping rule; the flag
    /// reports whether regularization fired.
    pub fn norm_regularized(&self, x: &[f64]) -> (f64, bool) {
        let r = linalg::norm(x);
        let limit = self.singular_limit();
        let (r_eff, clamped) = if r >= limit { (r, false) } else { (limit, true) };
        let value = match &self.rule {
            Rule::PowerLaw => self.alpha / r_eff.powf(self.gamma),
            Rule::BiotSavart => 1.0 / (2.0 * PI * r_eff),
            Rule::Custom(f) => {
                let mut m = vec![0.0; self.dim * self.dim];
                let mut y = vec![0.0; self.dim];
                if r < MIN_RADIUS {
                    y[0] = r_eff;
                } else {
                    let s = r_eff / r;
                    for (yi, xi) in y.iter_mut().zip(x) {
                        *yi = xi * s;
                    }
                }
                f(&y, &mut m);
                linalg::operator_norm(&m)
            }
        };
        (value, clamped)
    }

    /// Operator norm of `K(x)`.
    pub fn norm(&self, x: &[f64]) -> Result<f64> {
        self.check_radius(x)?;
        Ok(self.norm_regularized(x).0)
    }

    /// The envelope value `alpha / |x|^gamma`.
    pub fn envelope(&self, x: &[f64]) -> Result<f64> {
        let r = linalg::norm(x);
        if r < MIN_RADIUS {
            return Err(Error::Singular {
                radius: r,
                limit: MIN_RADIUS,
            });
        }
        Ok(self.alpha / r.powf(self.gamma))
    }

    /// Split `K(x)` into its restriction to the closed ball of radius `R`
    /// and to the complement. Exactly one part is nonzero; they sum to
    /// `K(x)` identically. The boundary `|x| = R` belongs to the ball.
    pub fn split_cutoff(&self, radius: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter {
                name: "radius",
                value: radius,
                constraint: "R > 0",
            });
        }
        let r = self.check_radius(x)?;
        let mut ball = vec![0.0; self.dim * self.dim];
        let mut comp = vec![0.0; self.dim * self.dim];
        if r <= radius {
            self.eval_unchecked(x, r, &mut ball);
        } else {
            self.eval_unchecked(x, r, &mut comp);
        }
        Ok((ball, comp))
    }

    /// Whether `x` falls in the closed cutoff ball (after clamping).
    pub fn in_ball(&self, radius: f64, x: &[f64]) -> bool {
        linalg::norm(x).max(self.singular_limit()) <= radius
    }

    /// Spot-check the envelope contract `|K(x)| <= alpha / |x|^gamma` on
    /// `n` random points with radii spread over several decades.
    pub fn check_envelope(&self, n: usize, seed: u64) -> Result<()> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::Role::Probe, 0, 0);
        for _ in 0..n {
            let r = 10f64.powf(rng.gen_range(-3.0..2.0)).max(self.singular_limit() * 2.0);
            let mut x: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nx = linalg::norm(&x);
            if nx < MIN_RADIUS {
                continue;
            }
            for xi in x.iter_mut() {
                *xi *= r / nx;
            }
            let got = self.norm(&x)?;
            let bound = self.envelope(&x)?;
            if got > bound * (1.0 + 1e-9) {
                return Err(Error::InvalidSpec(format!(
                    "kernel norm {got:.6e} exceeds envelope {bound:.6e} at |x| = {r:.6e}"
                )));
            }
        }
        Ok(())
    }
}
