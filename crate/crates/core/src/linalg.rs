//! Small dense matrix helpers for runtime-dimensional `d x d` problems.
//!
//! The engine works in low dimension (d = 2 or 3 at desk scale) but keeps
//! `d` a runtime value. Matrices are row-major `&[f64]` slices of length
//! `d*d`; everything here is allocation-free so it can sit in the path
//! loops.

/// `out = m . v` for a row-major `d x d` matrix.
pub fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    debug_assert_eq!(m.len(), d * d);
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * v[j];
        }
        out[i] = acc;
    }
}

/// `out = m^T m` (the metric of a noise coefficient).
pub fn gram(m: &[f64], out: &mut [f64]) {
    let d = (m.len() as f64).sqrt() as usize;
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += m[k * d + i] * m[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
}

/// Invert a small matrix in place of `out` by Gauss-Jordan with partial
/// pivoting. Returns false when the pivot degenerates.
pub fn invert(m: &[f64], out: &mut [f64], scratch: &mut [f64]) -> bool {
    let d = (m.len() as f64).sqrt() as usize;
    scratch.copy_from_slice(m);
    out.fill(0.0);
    for i in 0..d {
        out[i * d + i] = 1.0;
    }
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if scratch[r * d + col].abs() > scratch[pivot * d + col].abs() {
                pivot = r;
            }
        }
        let p = scratch[pivot * d + col];
        if p == 0.0 || !p.is_finite() {
            return false;
        }
        if pivot != col {
            for j in 0..d {
                scratch.swap(col * d + j, pivot * d + j);
                out.swap(col * d + j, pivot * d + j);
            }
        }
        let inv_p = 1.0 / scratch[col * d + col];
        for j in 0..d {
            scratch[col * d + j] *= inv_p;
            out[col * d + j] *= inv_p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = scratch[r * d + col];
            if f != 0.0 {
                for j in 0..d {
                    scratch[r * d + j] -= f * scratch[col * d + j];
                    out[r * d + j] -= f * out[col * d + j];
                }
            }
        }
    }
    true
}

/// Quadratic form `a^T m c`.
pub fn quad_form(m: &[f64], a: &[f64], c: &[f64]) -> f64 {
    let d = a.len();
    let mut acc = 0.0;
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        let mut inner = 0.0;
        for j in 0..d {
            inner += row[j] * c[j];
        }
        acc += a[i] * inner;
    }
    acc
}

/// Operator (spectral) norm. Closed form for d <= 2, power iteration on
/// `m^T m` otherwise; the iteration is deterministic (fixed start vector).
pub fn operator_norm(m: &[f64]) -> f64 {
    let d = (m.len() as f64).sqrt() as usize;
    match d {
        0 => 0.0,
        1 => m[0].abs(),
        2 => {
            // singular values of [[a,b],[c,e]] from the Gram eigenvalues
            let (a, b, c, e) = (m[0], m[1], m[2], m[3]);
            let g11 = a * a + c * c;
            let g22 = b * b + e * e;
            let g12 = a * b + c * e;
            let tr = g11 + g22;
            let disc = ((g11 - g22) * (g11 - g22) + 4.0 * g12 * g12).sqrt();
            (0.5 * (tr + disc)).max(0.0).sqrt()
        }
        _ => {
            let mut g = vec![0.0; d * d];
            gram(m, &mut g);
            let mut v = vec![0.0; d];
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = 1.0 + (i as f64) * 0.1;
            }
            let mut w = vec![0.0; d];
            let mut lambda = 0.0;
            for _ in 0..200 {
                matvec(&g, &v, &mut w);
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return 0.0;
                }
                for (vi, wi) in v.iter_mut().zip(&w) {
                    *vi = wi / norm;
                }
                lambda = norm;
            }
            lambda.sqrt()
        }
    }
}

/// All eigenvalues of a symmetric `m` lie in `[lo, hi]`, tested through
/// Cholesky factorizations of `m - lo I` and `hi I - m`.
pub fn sym_eigs_within(m: &[f64], lo: f64, hi: f64) -> bool {
    let d = (m.len() as f64).sqrt() as usize;
    let shifted = |sign: f64, shift: f64| -> Vec<f64> {
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = sign * m[i * d + j];
            }
            s[i * d + i] += shift;
        }
        s
    };
    cholesky_ok(&shifted(1.0, -lo)) && cholesky_ok(&shifted(-1.0, hi))
}

fn cholesky_ok(m: &[f64]) -> bool {
    let d = (m.len() as f64).sqrt() as usize;
    let mut l = vec![0.0; d * d];
    // tolerate tiny negative pivots from roundoff
    let tol = -1e-12 * (1.0 + m.iter().fold(0.0f64, |a, x| a.max(x.abs())));
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s < tol {
                    return false;
                }
                l[i * d + i] = s.max(0.0).sqrt();
            } else if l[j * d + j] > 0.0 {
                l[i * d + j] = s / l[j * d + j];
            } else {
                l[i * d + j] = 0.0;
            }
        }
    }
    true
}

/// Euclidean norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean distance.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn invert_recovers_identity() {
        let m = [2.0, 1.0, 0.5, -1.0, 0.25, 2.0, 3.0, 0.0, 1.0];
        let mut inv = [0.0; 9];
        let mut scratch = [0.0; 9];
        assert!(invert(&m, &mut inv, &mut scratch));
        let mut prod = [0.0; 3];
        for col in 0..3 {
            let v = [m[col], m[3 + col], m[6 + col]];
            matvec(&inv, &v, &mut prod);
            for r in 0..3 {
                let expect = if r == col { 1.0 } else { 0.0 };
                assert_relative_eq!(prod[r], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn operator_norm_matches_nalgebra() {
        use nalgebra::DMatrix;
        let cases: Vec<Vec<f64>> = vec![
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0, -1.0, 1.0, 0.0],
            vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, -5.0],
        ];
        for m in cases {
            let d = (m.len() as f64).sqrt() as usize;
            let nm = DMatrix::from_row_slice(d, d, &m);
            let svd = nm.svd(false, false);
            let expect = svd.singular_values.max();
            assert_relative_eq!(operator_norm(&m), expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn eig_interval_check() {
        // diag(0.5, 2) has eigenvalues {0.5, 2}
        let m = [0.5, 0.0, 0.0, 2.0];
        assert!(sym_eigs_within(&m, 0.5, 2.0));
        assert!(!sym_eigs_within(&m, 0.6, 2.0));
        assert!(!sym_eigs_within(&m, 0.5, 1.9));
    }
}
