use crate::error::{Error, Result};

/// Condition threshold above which the normal equations are reported.
pub const COND_WARN_THRESHOLD: f64 = 1e12;

/// Diagnostics from a ridge solve.
#[derive(Clone, Copy, Debug)]
pub struct RidgeDiag {
    /// Power-iteration estimate of cond(AᵀA + λI).
    pub cond_estimate: f64,
}

/// Solve `(AᵀA + λI) x = Aᵀ b` for `x`.
///
/// `a` is a flat row-major `n x p` matrix. Solved by Cholesky on the normal
/// equations; problem sizes here are at most a few hundred columns.
pub fn ridge_solve(a: &[f64], b: &[f64], n: usize, p: usize, lambda: f64) -> Result<Vec<f64>> {
    ridge_solve_with_diag(a, b, n, p, lambda).map(|(x, _)| x)
}

/// [`ridge_solve`] plus a condition-number estimate for the solved system.
pub fn ridge_solve_with_diag(
    a: &[f64],
    b: &[f64],
    n: usize,
    p: usize,
    lambda: f64,
) -> Result<(Vec<f64>, RidgeDiag)> {
    if n == 0 || p == 0 {
        return Err(Error::EmptyInput("ridge system"));
    }
    if a.len() != n * p || b.len() != n {
        return Err(Error::DataLength { expected: n * p, got: a.len() });
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidValue { context: "ridge lambda", value: lambda });
    }

    // Gram matrix AᵀA + λI and right-hand side Aᵀb.
    let mut gram = vec![0.0; p * p];
    for row in a.chunks_exact(p) {
        for (i, &ri) in row.iter().enumerate() {
            if ri == 0.0 {
                continue;
            }
            let grow = &mut gram[i * p..(i + 1) * p];
            for (g, &rj) in grow.iter_mut().zip(row.iter()) {
                *g += ri * rj;
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += lambda;
    }
    let mut rhs = vec![0.0; p];
    for (row, &bv) in a.chunks_exact(p).zip(b.iter()) {
        for (r, &ri) in rhs.iter_mut().zip(row.iter()) {
            *r += ri * bv;
        }
    }

    let chol = match cholesky(&gram, p) {
        Some(l) => l,
        // A failed pivot puts an eigenvalue at or below zero.
        None => return Err(Error::SingularSystem { cond_estimate: f64::INFINITY }),
    };
    let x = chol_solve(&chol, &rhs, p);
    let diag = RidgeDiag { cond_estimate: cond_estimate(&gram, &chol, p) };
    Ok((x, diag))
}

/// Lower-triangular Cholesky factor, or None when a pivot is not positive.
fn cholesky(m: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut sum = m[i * p + j];
            for k in 0..j {
                sum -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * p + i] = sum.sqrt();
            } else {
                l[i * p + j] = sum / l[j * p + j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[f64], rhs: &[f64], p: usize) -> Vec<f64> {
    // Forward substitution L y = rhs, then back substitution Lᵀ x = y.
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l[i * p + k] * y[k];
        }
        y[i] = sum / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut sum = y[i];
        for k in i + 1..p {
            sum -= l[k * p + i] * x[k];
        }
        x[i] = sum / l[i * p + i];
    }
    x
}

/// cond estimate = lambda_max / lambda_min via power iteration, with the
/// inverse iterate going through the existing Cholesky factor.
fn cond_estimate(gram: &[f64], chol: &[f64], p: usize) -> f64 {
    let matvec = |v: &[f64], out: &mut [f64]| {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &gram[i * p..(i + 1) * p];
            *o = row.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        }
    };
    let mut v = vec![0.0; p];
    for (i, vi) in v.iter_mut().enumerate() {
        *vi = 1.0 + (i as f64 * 0.618).fract();
    }
    let mut tmp = vec![0.0; p];
    let mut lo = 0.0;
    let mut hi = 0.0;
    for _ in 0..60 {
        matvec(&v, &mut tmp);
        let norm = tmp.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return f64::INFINITY;
        }
        hi = norm;
        for (vi, t) in v.iter_mut().zip(tmp.iter()) {
            *vi = t / norm;
        }
    }
    let mut w: Vec<f64> = (0..p).map(|i| 1.0 - (i as f64 * 0.377).fract()).collect();
    for _ in 0..60 {
        let y = chol_solve(chol, &w, p);
        let norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return f64::INFINITY;
        }
        lo = 1.0 / norm;
        for (wi, yi) in w.iter_mut().zip(y.iter()) {
            *wi = yi / norm;
        }
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_system() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let x = ridge_solve(&a, &[1.0, 2.0], 2, 2, 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_with_lambda_shrinks() {
        // (I + I) x = b so x = b / 2... with lambda 1: (1+1) x = b.
        let a = [1.0, 0.0, 0.0, 1.0];
        let x = ridge_solve(&a, &[1.0, 2.0], 2, 2, 1.0).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_system_matches_direct_normal_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, p) = (20, 5);
        let a: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda = 1e-3;
        let x = ridge_solve(&a, &b, n, p, lambda).unwrap();

        // Oracle: dense Gauss-Jordan on the same normal equations.
        let mut m = vec![0.0; p * (p + 1)];
        for i in 0..p {
            for j in 0..p {
                let mut s = if i == j { lambda } else { 0.0 };
                for r in 0..n {
                    s += a[r * p + i] * a[r * p + j];
                }
                m[i * (p + 1) + j] = s;
            }
            let mut s = 0.0;
            for r in 0..n {
                s += a[r * p + i] * b[r];
            }
            m[i * (p + 1) + p] = s;
        }
        for col in 0..p {
            let pivot = (col..p).max_by(|&r1, &r2| {
                m[r1 * (p + 1) + col].abs().partial_cmp(&m[r2 * (p + 1) + col].abs()).unwrap()
            })
            .unwrap();
            for j in 0..=p {
                m.swap(col * (p + 1) + j, pivot * (p + 1) + j);
            }
            let pv = m[col * (p + 1) + col];
            for j in 0..=p {
                m[col * (p + 1) + j] /= pv;
            }
            for r in 0..p {
                if r != col {
                    let f = m[r * (p + 1) + col];
                    for j in 0..=p {
                        m[r * (p + 1) + j] -= f * m[col * (p + 1) + j];
                    }
                }
            }
        }
        for i in 0..p {
            assert!((x[i] - m[i * (p + 1) + p]).abs() < 1e-8, "coord {i}");
        }
    }

    #[test]
    fn residual_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, p) = (30, 8);
        let a: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lambda = 0.5;
        let x = ridge_solve(&a, &b, n, p, lambda).unwrap();
        // residual (AᵀA + λI)x − Aᵀb in max norm
        let mut atb = vec![0.0; p];
        for r in 0..n {
            for i in 0..p {
                atb[i] += a[r * p + i] * b[r];
            }
        }
        let mut worst: f64 = 0.0;
        for i in 0..p {
            let mut lhs = lambda * x[i];
            for j in 0..p {
                let mut g = 0.0;
                for r in 0..n {
                    g += a[r * p + i] * a[r * p + j];
                }
                lhs += g * x[j];
            }
            worst = worst.max((lhs - atb[i]).abs());
        }
        let scale = 1.0 + atb.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9 * scale, "residual {worst} scale {scale}");
    }

    #[test]
    fn singular_at_zero_lambda_rejected() {
        // Rank-1 matrix: two identical columns.
        let a = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let err = ridge_solve(&a, &[1.0, 2.0, 3.0], 3, 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularSystem { .. }));
        // The same system regularized solves fine.
        assert!(ridge_solve(&a, &[1.0, 2.0, 3.0], 3, 2, 1e-6).is_ok());
    }

    #[test]
    fn large_lambda_drives_solution_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, p) = (10, 3);
        let a: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = ridge_solve(&a, &b, n, p, 1e12).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn cond_estimate_sane_for_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let (_, diag) = ridge_solve_with_diag(&a, &[1.0, 1.0], 2, 2, 0.0).unwrap();
        assert!(diag.cond_estimate < 10.0);
    }
}
