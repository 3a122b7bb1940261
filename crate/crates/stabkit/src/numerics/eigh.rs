//! Dense symmetric eigendecomposition and SPD solves.
//!
//! The eigendecomposition uses cyclic Jacobi rotations. It is the desk-scale
//! ground-truth oracle for the matrix-free eigensolver, so sizes are capped
//! and accuracy is favored over speed.

use crate::error::{Error, Result};
use crate::numerics::{SymMatrix, Vector};

/// Largest matrix the dense routines accept.
pub const DENSE_SIZE_LIMIT: usize = 512;

const MAX_JACOBI_SWEEPS: usize = 100;

/// Full eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues sorted descending by algebraic value and the matching
/// orthonormal eigenvectors. Each returned pair satisfies
/// `||M u - lambda u|| <= 1e-8 * (1 + ||M||_2)`.
pub fn dense_sym_eigh(m: &SymMatrix) -> Result<(Vector, Vec<Vector>)> {
    let n = m.n();
    if n > DENSE_SIZE_LIMIT {
        return Err(Error::SizeLimit {
            what: "dense eigendecomposition dimension",
            actual: n,
            limit: DENSE_SIZE_LIMIT,
        });
    }
    if n == 0 {
        return Ok((Vector::zeros(0), Vec::new()));
    }

    // Working copies: a is rotated toward diagonal, v accumulates rotations.
    let mut a: Vec<f64> = (0..n * n).map(|i| m.get(i / n, i % n)).collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = 1e-14 * fro.max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[p * n + q] * a[p * n + q];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= stop {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Skip rotations already at rounding level.
                if apq.abs() <= f64::EPSILON * 0.5 * (app.abs() + aqq.abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::InvalidArgument(format!(
            "Jacobi eigendecomposition did not converge in {MAX_JACOBI_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));

    let eigenvalues = Vector::from_fn(n, |r| a[order[r] * n + order[r]]);
    let eigenvectors: Vec<Vector> = order
        .iter()
        .map(|&col| Vector::from_fn(n, |i| v[i * n + col]))
        .collect();
    Ok((eigenvalues, eigenvectors))
}

/// Solves `M x = b` for symmetric positive definite `M` via Cholesky.
///
/// A non-positive pivot aborts with the failing pivot index.
pub fn solve_spd(m: &SymMatrix, b: &Vector) -> Result<Vector> {
    let n = m.n();
    assert_eq!(b.len(), n, "solve_spd: dimension mismatch");
    if n > DENSE_SIZE_LIMIT {
        return Err(Error::SizeLimit {
            what: "dense SPD solve dimension",
            actual: n,
            limit: DENSE_SIZE_LIMIT,
        });
    }

    // Lower-triangular Cholesky factor, row-major.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::FactorizationFailure { pivot: i });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }

    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    Vector::new(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn reconstruction_error(m: &SymMatrix, vals: &Vector, vecs: &[Vector]) -> f64 {
        let n = m.n();
        let mut err = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut r = -m.get(i, j);
                for (l, u) in vecs.iter().enumerate() {
                    r += vals[l] * u[i] * u[j];
                }
                err += r * r;
            }
        }
        err.sqrt()
    }

    #[test]
    fn diagonal_matrix() {
        let m = SymMatrix::diag(&Vector::new(vec![5.0, 1.0]).unwrap());
        let (vals, vecs) = dense_sym_eigh(&m).unwrap();
        assert_eq!(vals.as_slice(), &[5.0, 1.0]);
        assert!((vecs[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(vecs[0][1].abs() < 1e-12);
    }

    #[test]
    fn identity_reconstruction() {
        let m = SymMatrix::identity(4);
        let (vals, vecs) = dense_sym_eigh(&m).unwrap();
        assert_eq!(vals.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(reconstruction_error(&m, &vals, &vecs) < 1e-12);
    }

    #[test]
    fn random_symmetric_reconstruction_and_residuals() {
        let mut rng = RngStream::new(11, 0);
        let n = 50;
        let g = rng.sample_std_normal(n * n).unwrap();
        let m = SymMatrix::from_rows(n, g.as_slice().to_vec()).unwrap();
        let (vals, vecs) = dense_sym_eigh(&m).unwrap();

        let fro = m.frob_norm();
        assert!(reconstruction_error(&m, &vals, &vecs) <= 1e-8 * fro);

        // Eigenvalues sorted descending by algebraic value.
        for i in 1..n {
            assert!(vals[i - 1] >= vals[i]);
        }

        // Per-pair residual and orthonormality contracts.
        let norm2 = vals[0].abs().max(vals[n - 1].abs());
        for (i, u) in vecs.iter().enumerate() {
            let r = m.apply(u).sub(&u.scale(vals[i]));
            assert!(r.norm2() <= 1e-8 * (1.0 + norm2));
            for (j, w) in vecs.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((u.dot(w) - expect).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn size_limit_enforced() {
        let m = SymMatrix::zeros(513);
        assert!(matches!(dense_sym_eigh(&m), Err(Error::SizeLimit { .. })));
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let b = Vector::new(vec![2.0, 8.0]).unwrap();
        let x = solve_spd(&SymMatrix::identity(2), &b).unwrap();
        assert_eq!(x.as_slice(), &[2.0, 8.0]);

        let m = SymMatrix::diag(&Vector::new(vec![2.0, 4.0]).unwrap());
        let x = solve_spd(&m, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_random_spd_residual() {
        let mut rng = RngStream::new(3, 0);
        let n = 30;
        let g = rng.sample_std_normal(n * n).unwrap();
        // A^T A + I is comfortably positive definite.
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    s += g[k * n + i] * g[k * n + j];
                }
                data[i * n + j] = s;
            }
        }
        let m = SymMatrix::from_rows(n, data).unwrap();
        let b = rng.sample_std_normal(n).unwrap();
        let x = solve_spd(&m, &b).unwrap();
        let resid = m.apply(&x).sub(&b).norm2();
        assert!(resid <= 1e-10 * (m.frob_norm() * x.norm2() + b.norm2()));
    }

    #[test]
    fn solve_rejects_indefinite() {
        let m = SymMatrix::diag(&Vector::new(vec![1.0, -2.0]).unwrap());
        let b = Vector::new(vec![1.0, 1.0]).unwrap();
        match solve_spd(&m, &b) {
            Err(Error::FactorizationFailure { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected factorization failure, got {other:?}"),
        }
    }
}
