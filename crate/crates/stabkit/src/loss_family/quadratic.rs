//! Exactly solvable quadratic loss family.
//!
//! Each sample carries a positive semidefinite curvature `Q_i`, a center
//! `m_i`, and an offset `b_i`, with per-sample loss
//! `l_i(w) = 1/2 (w - m_i)^T Q_i (w - m_i) + b_i`. Gradients, Hessians and
//! minimizers are closed forms, which makes every downstream quantity
//! exactly checkable.

use crate::error::{invalid_argument, Error, Result};
use crate::numerics::{solve_spd, SymMatrix, Vector, DENSE_SIZE_LIMIT};

/// Per-sample curvature storage.
///
/// Dense matrices cover the desk-scale rotated ensembles; the diagonal form
/// keeps large-dimension ensembles (used for cost measurements) at O(N) per
/// sample without materializing an N x N matrix.
#[derive(Debug, Clone)]
pub enum Curvatures {
    Dense(Vec<SymMatrix>),
    Diagonal(Vec<Vector>),
}

#[derive(Debug, Clone)]
pub struct QuadraticFamily {
    dim: usize,
    centers: Vec<Vector>,
    offsets: Vec<f64>,
    curvatures: Curvatures,
}

impl QuadraticFamily {
    pub fn from_parts(
        centers: Vec<Vector>,
        curvatures: Vec<SymMatrix>,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        if centers.is_empty() || centers.len() != curvatures.len() || centers.len() != offsets.len()
        {
            return Err(invalid_argument("quadratic family: sample counts disagree"));
        }
        let dim = centers[0].len();
        if centers.iter().any(|m| m.len() != dim) || curvatures.iter().any(|q| q.n() != dim) {
            return Err(invalid_argument("quadratic family: dimension mismatch"));
        }
        Ok(QuadraticFamily {
            dim,
            centers,
            offsets,
            curvatures: Curvatures::Dense(curvatures),
        })
    }

    pub fn from_diagonal_parts(
        centers: Vec<Vector>,
        diagonals: Vec<Vector>,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        if centers.is_empty() || centers.len() != diagonals.len() || centers.len() != offsets.len()
        {
            return Err(invalid_argument("quadratic family: sample counts disagree"));
        }
        let dim = centers[0].len();
        if centers.iter().any(|m| m.len() != dim) || diagonals.iter().any(|d| d.len() != dim) {
            return Err(invalid_argument("quadratic family: dimension mismatch"));
        }
        Ok(QuadraticFamily {
            dim,
            centers,
            offsets,
            curvatures: Curvatures::Diagonal(diagonals),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn max_samples(&self) -> usize {
        self.centers.len()
    }

    pub fn curvatures(&self) -> &Curvatures {
        &self.curvatures
    }

    pub fn loss(&self, i: usize, w: &Vector) -> f64 {
        match &self.curvatures {
            Curvatures::Dense(qs) => {
                let v = w.sub(&self.centers[i]);
                0.5 * qs[i].quad_form(&v) + self.offsets[i]
            }
            Curvatures::Diagonal(ds) => {
                let m = &self.centers[i];
                let d = &ds[i];
                let mut s = 0.0;
                for j in 0..self.dim {
                    let v = w[j] - m[j];
                    s += d[j] * v * v;
                }
                0.5 * s + self.offsets[i]
            }
        }
    }

    pub fn grad(&self, i: usize, w: &Vector) -> Vector {
        match &self.curvatures {
            Curvatures::Dense(qs) => qs[i].apply(&w.sub(&self.centers[i])),
            Curvatures::Diagonal(ds) => {
                let m = &self.centers[i];
                let d = &ds[i];
                Vector::from_fn(self.dim, |j| d[j] * (w[j] - m[j]))
            }
        }
    }

    pub fn hvp(&self, i: usize, v: &Vector) -> Vector {
        match &self.curvatures {
            Curvatures::Dense(qs) => qs[i].apply(v),
            Curvatures::Diagonal(ds) => {
                let d = &ds[i];
                Vector::from_fn(self.dim, |j| d[j] * v[j])
            }
        }
    }

    pub fn hessian(&self, i: usize) -> Result<SymMatrix> {
        if self.dim > DENSE_SIZE_LIMIT {
            return Err(Error::SizeLimit {
                what: "dense Hessian dimension",
                actual: self.dim,
                limit: DENSE_SIZE_LIMIT,
            });
        }
        Ok(match &self.curvatures {
            Curvatures::Dense(qs) => qs[i].clone(),
            Curvatures::Diagonal(ds) => SymMatrix::diag(&ds[i]),
        })
    }

    /// Exact change `l_i(w + delta) - l_i(w)`, rearranged to avoid the
    /// cancellation of subtracting two nearly equal losses:
    /// `(w - m_i + delta/2)^T Q_i delta`.
    pub fn loss_difference(&self, i: usize, w: &Vector, delta: &Vector) -> f64 {
        match &self.curvatures {
            Curvatures::Dense(qs) => {
                let mut v = w.sub(&self.centers[i]);
                v.axpy_mut(0.5, delta);
                v.dot(&qs[i].apply(delta))
            }
            Curvatures::Diagonal(ds) => {
                let m = &self.centers[i];
                let d = &ds[i];
                let mut s = 0.0;
                for j in 0..self.dim {
                    s += (w[j] - m[j] + 0.5 * delta[j]) * d[j] * delta[j];
                }
                s
            }
        }
    }

    /// Exact minimizer of the mean of the first `k` losses: solves
    /// `(sum Q_i) w = sum Q_i m_i`. The mean curvature must be positive
    /// definite (generated ensembles guarantee this with a small ridge).
    pub fn minimize_exact(&self, k: usize) -> Result<Vector> {
        match &self.curvatures {
            Curvatures::Dense(qs) => {
                let mut h = SymMatrix::zeros(self.dim);
                let mut rhs = Vector::zeros(self.dim);
                for (q, m) in qs.iter().zip(&self.centers).take(k) {
                    h = h.add(q);
                    rhs.axpy_mut(1.0, &q.apply(m));
                }
                solve_spd(&h.scale(1.0 / k as f64), &rhs.scale(1.0 / k as f64))
            }
            Curvatures::Diagonal(ds) => {
                let mut h = vec![0.0; self.dim];
                let mut rhs = vec![0.0; self.dim];
                for (d, m) in ds.iter().zip(&self.centers).take(k) {
                    for j in 0..self.dim {
                        h[j] += d[j];
                        rhs[j] += d[j] * m[j];
                    }
                }
                for (j, hj) in h.iter().enumerate() {
                    if *hj <= 0.0 {
                        return Err(Error::FactorizationFailure { pivot: j });
                    }
                }
                Vector::new((0..self.dim).map(|j| rhs[j] / h[j]).collect())
            }
        }
    }
}
