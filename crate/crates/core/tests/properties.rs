//! Property tests for the pure algebraic invariants.

use mvsde::constants::{
    admissible_horizon, contraction_factor, perturbation_constant, stability_constant,
};
use mvsde::diffusion::{DriftField, SpaceGrid};
use mvsde::kernels::KernelSpec;
use mvsde::linalg;
use proptest::prelude::*;

proptest! {
    /// The cutoff split partitions the kernel: one part vanishes, the
    /// other carries the full value, and the sum is exact.
    #[test]
    fn split_cutoff_partitions(
        x0 in -3.0f64..3.0,
        x1 in -3.0f64..3.0,
        radius in 0.05f64..3.0,
        alpha in 0.01f64..3.0,
        gamma in 0.0f64..1.9,
    ) {
        let x = [x0, x1];
        prop_assume!(linalg::norm(&x) > 1e-6);
        for kernel in [
            KernelSpec::biot_savart(0.0),
            KernelSpec::power_law(2, alpha, gamma, 0.0).unwrap(),
        ] {
            let (ball, comp) = kernel.split_cutoff(radius, &x).unwrap();
            let full = kernel.eval(&x).unwrap();
            let ball_zero = ball.iter().all(|&v| v == 0.0);
            let comp_zero = comp.iter().all(|&v| v == 0.0);
            prop_assert!(ball_zero || comp_zero);
            for i in 0..4 {
                prop_assert_eq!(ball[i] + comp[i], full[i]);
            }
        }
    }

    /// Operator norms of the built-in kernels never exceed the envelope.
    #[test]
    fn envelope_dominates(
        x0 in -5.0f64..5.0,
        x1 in -5.0f64..5.0,
        alpha in 0.01f64..3.0,
        gamma in 0.0f64..1.9,
    ) {
        let x = [x0, x1];
        prop_assume!(linalg::norm(&x) > 1e-4);
        for kernel in [
            KernelSpec::biot_savart(0.0),
            KernelSpec::power_law(2, alpha, gamma, 0.0).unwrap(),
        ] {
            let norm = kernel.norm(&x).unwrap();
            let env = kernel.envelope(&x).unwrap();
            prop_assert!(norm <= env * (1.0 + 1e-12), "{norm} > {env}");
        }
    }

    /// Interpolated drift values stay inside the ball spanned by the node
    /// values, so membership in the sup-norm ball survives interpolation.
    #[test]
    fn drift_interpolation_bounded(
        qx in -3.0f64..3.0,
        qy in -3.0f64..3.0,
        qt in 0.0f64..1.0,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let grid = SpaceGrid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![4, 5]).unwrap();
        let field = DriftField::from_fn(vec![0.0, 0.5, 1.0], grid, |t, x| {
            vec![a * (3.0 * x[0] + t).sin(), b * (2.0 * x[1]).cos()]
        }).unwrap();
        let v = field.eval(qt, &[qx, qy]).unwrap();
        prop_assert!(linalg::norm(&v) <= field.sup_norm() + 1e-12);
    }

    /// The perturbation constant dominates `A v kappa q` and is monotone
    /// in `xi`, `A` and `kappa`; the admissible horizon always yields a
    /// contraction factor below one at a quarter of the horizon.
    #[test]
    fn constants_invariants(
        xi in 1.0f64..2.0,
        a in 0.3f64..3.0,
        kappa in 0.3f64..3.0,
        q_frac in 0.1f64..0.9,
        c0 in 0.01f64..1e4,
    ) {
        for d in [2usize, 3] {
            let upper = d as f64 / (d as f64 - 1.0);
            let q = 1.0 + q_frac * (upper - 1.0);
            let c = perturbation_constant(d, xi, a, kappa, q).unwrap();
            prop_assert!(c >= a.max(kappa * q));
            prop_assert!(perturbation_constant(d, xi * 1.2, a, kappa, q).unwrap() >= c - 1e-12);
            prop_assert!(perturbation_constant(d, xi, a * 1.2, kappa, q).unwrap() >= c - 1e-12);
            prop_assert!(perturbation_constant(d, xi, a, kappa * 1.2, q).unwrap() >= c - 1e-12);
        }
        let h = admissible_horizon(c0, xi).unwrap();
        prop_assert!(h.l >= 1.0 && h.l >= c0);
        prop_assert!((h.t_l - 1.0 / (h.l * h.l)).abs() < 1e-15 * (1.0 + h.t_l));
        prop_assert!(h.t_l <= 1.0 + 1e-15);
        prop_assert!(contraction_factor(c0, xi, h.tau_max / 4.0) < 1.0);
    }

    /// The optimized stability constant never beats a directly evaluated
    /// radius by construction.
    #[test]
    fn optimized_radius_is_minimal(
        alpha in 0.05f64..2.0,
        c in 1.0f64..100.0,
        gamma in 0.1f64..1.8,
        w1 in 0.1f64..3.0,
        winf in 0.1f64..3.0,
        r_scale in -2.0f64..2.0,
    ) {
        let q = 1.25;
        let (r_star, c0_star) =
            mvsde::constants::optimize_cutoff_radius(alpha, c, 2, gamma, w1, winf, 1.0, q).unwrap();
        let r = r_star * 10f64.powf(r_scale);
        let c0 = stability_constant(alpha, c, 2, gamma, r, w1, winf, 1.0, q).unwrap();
        prop_assert!(c0 >= c0_star * (1.0 - 1e-12));
    }
}
