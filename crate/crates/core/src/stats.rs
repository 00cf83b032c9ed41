//! Shared statistical helpers for the verification reports.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

/// One-sample Kolmogorov-Smirnov statistic against `N(mean, sd^2)`;
/// `sorted` must be ascending.
pub fn ks_statistic_gaussian(sorted: &[f64], mean: f64, sd: f64) -> f64 {
    let n = sorted.len() as f64;
    let normal = Normal::new(mean, sd).unwrap();
    let mut worst = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal.cdf(x);
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        worst = worst.max(hi.max(lo));
    }
    worst
}

/// Upper quantile of the chi-squared distribution with `k` degrees of
/// freedom, i.e. the value exceeded with probability `alpha`.
pub fn chi2_upper_quantile(k: usize, alpha: f64) -> f64 {
    ChiSquared::new(k as f64).unwrap().inverse_cdf(1.0 - alpha)
}

/// Probability mass of the `d`-dimensional isotropic Gaussian
/// `N(mean, var . I)` on an axis-aligned box.
pub fn gaussian_box_mass(mean: &[f64], var: f64, lo: &[f64], hi: &[f64]) -> f64 {
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    mean.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&m, (&a, &b))| normal.cdf((b - m) / sd) - normal.cdf((a - m) / sd))
        .product()
}

/// Density of the `d`-dimensional isotropic Gaussian `N(mean, var . I)`.
pub fn gaussian_density(mean: &[f64], var: f64, x: &[f64]) -> f64 {
    let d = mean.len() as f64;
    let r2: f64 = mean.iter().zip(x).map(|(m, xi)| (xi - m) * (xi - m)).sum();
    (2.0 * std::f64::consts::PI * var).powf(-d / 2.0) * (-r2 / (2.0 * var)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ks_of_exact_grid_is_small() {
        // quantile grid of the standard normal has KS ~ 1/(2n)
        let n = 1000;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..n)
            .map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64))
            .collect();
        let ks = ks_statistic_gaussian(&xs, 0.0, 1.0);
        assert!(ks <= 0.5 / n as f64 + 1e-9, "ks = {ks}");
    }

    #[test]
    fn gaussian_box_mass_sanity() {
        // one-dimensional central interval of +-1.96 sd
        let m = gaussian_box_mass(&[0.0], 1.0, &[-1.96], &[1.96]);
        assert_relative_eq!(m, 0.95, epsilon = 1e-3);
    }

    #[test]
    fn chi2_quantile_sanity() {
        // median of chi2_1 is ~0.455
        let q = chi2_upper_quantile(1, 0.5);
        assert_relative_eq!(q, 0.4549, epsilon = 1e-3);
    }
}
