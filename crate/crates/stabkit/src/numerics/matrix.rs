//! Dense symmetric matrix storage with exact symmetry by construction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, Result};
use crate::numerics::Vector;

/// Dense row-major symmetric `n x n` matrix.
///
/// Construction stores `(M + M^T) / 2`, so `get(i, j) == get(j, i)` holds
/// exactly afterwards. This absorbs the floating-point asymmetry of matrices
/// assembled from Hessian-vector products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Symmetrizes and validates a dense row-major buffer of length `n * n`.
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(invalid_argument(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(invalid_argument(format!(
                "non-finite matrix entry at flat index {i}"
            )));
        }
        let mut m = SymMatrix { n, data };
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (m.data[i * n + j] + m.data[j * n + i]);
                m.data[i * n + j] = avg;
                m.data[j * n + i] = avg;
            }
        }
        Ok(m)
    }

    /// Builds from an entry generator; `f(i, j)` and `f(j, i)` are averaged.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let avg = if i == j {
                    f(i, i)
                } else {
                    0.5 * (f(i, j) + f(j, i))
                };
                data[i * n + j] = avg;
                data[j * n + i] = avg;
            }
        }
        SymMatrix { n, data }
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &Vector) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = entries[i];
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets `(i, j)` and `(j, i)` together, preserving symmetry.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &Vector) -> Vector {
        assert_eq!(v.len(), self.n, "apply: dimension mismatch");
        Vector::from_fn(self.n, |i| {
            self.row(i)
                .iter()
                .zip(v.as_slice())
                .map(|(a, x)| a * x)
                .sum()
        })
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.n, other.n, "add: dimension mismatch");
        SymMatrix {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.n, other.n, "sub: dimension mismatch");
        SymMatrix {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, a: f64) -> SymMatrix {
        SymMatrix {
            n: self.n,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `Tr(M^2)` for symmetric `M` equals the squared Frobenius norm.
    pub fn trace_of_square(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Compresses to `U^T M U` where `basis` holds the columns of `U`.
    pub fn project(&self, basis: &[Vector]) -> SymMatrix {
        let d = basis.len();
        let mu: Vec<Vector> = basis.iter().map(|u| self.apply(u)).collect();
        SymMatrix::from_fn(d, |i, j| basis[i].dot(&mu[j]))
    }

    /// Quadratic form `v^T M v`.
    pub fn quad_form(&self, v: &Vector) -> f64 {
        v.dot(&self.apply(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrizes_at_construction() {
        let m = SymMatrix::from_rows(2, vec![1.0, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 0), 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(SymMatrix::from_rows(2, vec![1.0; 3]).is_err());
        assert!(SymMatrix::from_rows(1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn apply_and_traces() {
        let m = SymMatrix::diag(&Vector::new(vec![2.0, 4.0]).unwrap());
        let v = Vector::new(vec![1.0, -1.0]).unwrap();
        assert_eq!(m.apply(&v).as_slice(), &[2.0, -4.0]);
        assert_eq!(m.trace(), 6.0);
        assert_eq!(m.trace_of_square(), 20.0);
        assert_eq!(m.quad_form(&v), 6.0);
    }

    #[test]
    fn projection_compresses() {
        let m = SymMatrix::diag(&Vector::new(vec![5.0, 1.0, 3.0]).unwrap());
        let basis = vec![Vector::basis(3, 0), Vector::basis(3, 2)];
        let p = m.project(&basis);
        assert_eq!(p.n(), 2);
        assert_eq!(p.get(0, 0), 5.0);
        assert_eq!(p.get(1, 1), 3.0);
        assert_eq!(p.get(0, 1), 0.0);
    }
}
