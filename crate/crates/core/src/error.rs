//! Error type shared across the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Kernel evaluation requested inside the singular/regularized core.
    #[error("singular point: |x| = {radius:.3e} is below the admissible radius {limit:.3e}")]
    Singular { radius: f64, limit: f64 },

    #[error("invalid parameter {name}: {value} (must satisfy {constraint})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("time {t} outside drift horizon [{lo}, {hi}]")]
    OutsideHorizon { t: f64, lo: f64, hi: f64 },

    /// A trajectory left the representable range; reported with context so
    /// the offending path can be reproduced from the seed.
    #[error("non-finite state in {context}: path {path}, step {step}")]
    NonFinite {
        context: &'static str,
        path: usize,
        step: usize,
    },

    #[error("ensemble was simulated with a drift; a zero-drift ensemble is required")]
    NotZeroDrift,

    #[error("density estimation requires a single start point, got {0}")]
    MultiStart(usize),

    #[error("proposal density is invalid: {0}")]
    Proposal(String),

    #[error("fixed-point iteration diverged after {iterations} iterations; sup-differences {diffs:?}")]
    Diverged { iterations: usize, diffs: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
