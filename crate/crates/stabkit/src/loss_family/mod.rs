//! Growable per-sample loss families.
//!
//! A family fixes `max_samples` twice-differentiable per-sample losses
//! `l_i(w)` up front; the empirical risk over `k` samples always averages the
//! first `k`, so growing the sample is nested by construction. Two kinds are
//! provided: an exactly solvable quadratic ensemble and a small smooth MLP.
//!
//! Samples are indexed from zero: `per_sample_loss(k, w)` is the `(k+1)`-th
//! sample, which is exactly the one that `increment(k, w)` adds to a risk
//! over `k` samples.

mod mlp;
mod quadratic;
mod spec;

pub use mlp::{parameter_count, Activation, MlpFamily};
pub use quadratic::{Curvatures, QuadraticFamily};
pub use spec::{
    family_hash, BasisKind, FamilySpec, MlpFamilySpec, QuadraticFamilySpec, SpectrumLaw,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, Error, Result};
use crate::numerics::{RngStream, SymMatrix, Vector, DENSE_SIZE_LIMIT};

/// Where a parameter point came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    /// Produced by [`LossFamily::minimize`] over the first `k` samples.
    /// `grad_norm_achieved` records the gradient norm actually reached;
    /// stationarity identities hold only up to this tolerance, and for the
    /// MLP a value above the requested tolerance flags non-convergence.
    Minimizer {
        k: usize,
        grad_norm_achieved: f64,
    },
}

/// A parameter point together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w: Vector,
    pub provenance: Provenance,
}

impl Weights {
    pub fn initial(w: Vector) -> Self {
        Weights {
            w,
            provenance: Provenance::Initial,
        }
    }

    pub fn achieved_grad_norm(&self) -> Option<f64> {
        match self.provenance {
            Provenance::Initial => None,
            Provenance::Minimizer {
                grad_norm_achieved, ..
            } => Some(grad_norm_achieved),
        }
    }
}

/// A growable collection of per-sample losses with a common interface.
#[derive(Debug, Clone)]
pub struct LossFamily {
    kind: Kind,
    spec: Option<FamilySpec>,
}

#[derive(Debug, Clone)]
enum Kind {
    Quadratic(QuadraticFamily),
    Mlp(MlpFamily),
}

impl LossFamily {
    /// Realizes a family from its spec; identical specs give identical
    /// families.
    pub fn generate(spec: &FamilySpec) -> Result<LossFamily> {
        spec.validate()?;
        let kind = match spec {
            FamilySpec::Quadratic(q) => Kind::Quadratic(spec::generate_quadratic(q)?),
            FamilySpec::Mlp(m) => Kind::Mlp(spec::generate_mlp(m)?),
        };
        Ok(LossFamily {
            kind,
            spec: Some(spec.clone()),
        })
    }

    pub fn from_quadratic(family: QuadraticFamily) -> LossFamily {
        LossFamily {
            kind: Kind::Quadratic(family),
            spec: None,
        }
    }

    pub fn from_mlp(family: MlpFamily) -> LossFamily {
        LossFamily {
            kind: Kind::Mlp(family),
            spec: None,
        }
    }

    pub fn spec(&self) -> Option<&FamilySpec> {
        self.spec.as_ref()
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            Kind::Quadratic(_) => "quadratic",
            Kind::Mlp(_) => "mlp",
        }
    }

    pub fn dimension(&self) -> usize {
        match &self.kind {
            Kind::Quadratic(f) => f.dimension(),
            Kind::Mlp(f) => f.dimension(),
        }
    }

    pub fn max_samples(&self) -> usize {
        match &self.kind {
            Kind::Quadratic(f) => f.max_samples(),
            Kind::Mlp(f) => f.max_samples(),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticFamily> {
        match &self.kind {
            Kind::Quadratic(f) => Some(f),
            Kind::Mlp(_) => None,
        }
    }

    fn check_sample(&self, i: usize) -> Result<()> {
        if i >= self.max_samples() {
            return Err(Error::IndexOutOfRange {
                index: i,
                max: self.max_samples(),
            });
        }
        Ok(())
    }

    fn check_count(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.max_samples() {
            return Err(invalid_argument(format!(
                "sample count {k} out of range 1..={}",
                self.max_samples()
            )));
        }
        Ok(())
    }

    /// Loss of sample `i` (zero-based) at `w`.
    pub fn per_sample_loss(&self, i: usize, w: &Vector) -> Result<f64> {
        self.check_sample(i)?;
        assert_eq!(w.len(), self.dimension(), "per_sample_loss: dimension");
        Ok(match &self.kind {
            Kind::Quadratic(f) => f.loss(i, w),
            Kind::Mlp(f) => f.loss(i, w),
        })
    }

    /// Gradient of sample `i` at `w`.
    pub fn per_sample_gradient(&self, i: usize, w: &Vector) -> Result<Vector> {
        self.check_sample(i)?;
        Ok(match &self.kind {
            Kind::Quadratic(f) => f.grad(i, w),
            Kind::Mlp(f) => f.grad(i, w),
        })
    }

    /// Hessian-vector product of sample `i` at `w`.
    pub fn per_sample_hvp(&self, i: usize, w: &Vector, v: &Vector) -> Result<Vector> {
        self.check_sample(i)?;
        if v.norm2() == 0.0 {
            return Err(invalid_argument("hvp direction must be nonzero"));
        }
        match &self.kind {
            Kind::Quadratic(f) => Ok(f.hvp(i, v)),
            Kind::Mlp(f) => f.hvp(i, w, v),
        }
    }

    /// Mean of the first `k` per-sample losses.
    pub fn empirical_risk(&self, k: usize, w: &Vector) -> Result<f64> {
        self.check_count(k)?;
        let mut s = 0.0;
        for i in 0..k {
            s += match &self.kind {
                Kind::Quadratic(f) => f.loss(i, w),
                Kind::Mlp(f) => f.loss(i, w),
            };
        }
        Ok(s / k as f64)
    }

    /// Gradient of the empirical risk over the first `k` samples.
    pub fn gradient(&self, k: usize, w: &Vector) -> Result<Vector> {
        self.check_count(k)?;
        let mut g = Vector::zeros(self.dimension());
        for i in 0..k {
            let gi = match &self.kind {
                Kind::Quadratic(f) => f.grad(i, w),
                Kind::Mlp(f) => f.grad(i, w),
            };
            g.axpy_mut(1.0, &gi);
        }
        Ok(g.scale(1.0 / k as f64))
    }

    /// Hessian-vector product of the empirical risk over the first `k`
    /// samples: exact for the quadratic family, a central difference of
    /// analytic gradients for the MLP.
    pub fn hvp(&self, k: usize, w: &Vector, v: &Vector) -> Result<Vector> {
        self.check_count(k)?;
        if v.norm2() == 0.0 {
            return Err(invalid_argument("hvp direction must be nonzero"));
        }
        let mut out = Vector::zeros(self.dimension());
        for i in 0..k {
            let hi = match &self.kind {
                Kind::Quadratic(f) => f.hvp(i, v),
                Kind::Mlp(f) => f.hvp(i, w, v)?,
            };
            out.axpy_mut(1.0, &hi);
        }
        Ok(out.scale(1.0 / k as f64))
    }

    /// Materialized empirical Hessian, for verification at dense sizes only.
    ///
    /// Quadratic families return the exact mean curvature; the MLP builds
    /// the matrix column by column from central differences of the analytic
    /// gradient and symmetrizes the result.
    pub fn dense_hessian_oracle(&self, k: usize, w: &Vector) -> Result<SymMatrix> {
        self.check_count(k)?;
        let n = self.dimension();
        if n > DENSE_SIZE_LIMIT {
            return Err(Error::SizeLimit {
                what: "dense Hessian oracle dimension",
                actual: n,
                limit: DENSE_SIZE_LIMIT,
            });
        }
        match &self.kind {
            Kind::Quadratic(f) => {
                let mut h = SymMatrix::zeros(n);
                for i in 0..k {
                    h = h.add(&f.hessian(i)?);
                }
                Ok(h.scale(1.0 / k as f64))
            }
            Kind::Mlp(_) => {
                let mut data = vec![0.0; n * n];
                for j in 0..n {
                    let h = f64::EPSILON.cbrt() * (1.0 + w[j].abs());
                    let mut wp = w.clone();
                    wp[j] += h;
                    let mut wm = w.clone();
                    wm[j] -= h;
                    let gp = self.gradient(k, &wp)?;
                    let gm = self.gradient(k, &wm)?;
                    for i in 0..n {
                        data[i * n + j] = (gp[i] - gm[i]) / (2.0 * h);
                    }
                }
                SymMatrix::from_rows(n, data)
            }
        }
    }

    /// One-sample increment `L_{k+1}(w) - L_k(w)`, computed through the
    /// exact identity `(l_{k+1}(w) - L_k(w)) / (k + 1)`, which avoids
    /// subtracting two nearly equal risks.
    pub fn increment(&self, k: usize, w: &Vector) -> Result<f64> {
        self.check_count(k)?;
        self.check_sample(k)?;
        let fresh = self.per_sample_loss(k, w)?;
        let risk = self.empirical_risk(k, w)?;
        Ok((fresh - risk) / (k + 1) as f64)
    }

    /// Risk change `L_k(w + delta) - L_k(w)` under a parameter shift.
    ///
    /// The quadratic family evaluates the algebraically exact per-sample
    /// difference, which is cancellation-free; the MLP subtracts two risk
    /// evaluations.
    pub fn risk_difference(&self, k: usize, w: &Vector, delta: &Vector) -> Result<f64> {
        self.check_count(k)?;
        match &self.kind {
            Kind::Quadratic(f) => {
                let mut s = 0.0;
                for i in 0..k {
                    s += f.loss_difference(i, w, delta);
                }
                Ok(s / k as f64)
            }
            Kind::Mlp(_) => {
                let shifted = w.add(delta);
                Ok(self.empirical_risk(k, &shifted)? - self.empirical_risk(k, w)?)
            }
        }
    }

    /// Second-order Taylor model of the risk change:
    /// `g^(k)(w0)^T delta + 1/2 delta^T H^(k)(w0) delta`.
    pub fn taylor_increment(&self, k: usize, w0: &Vector, delta: &Vector) -> Result<f64> {
        self.check_count(k)?;
        if delta.norm2() == 0.0 {
            return Ok(0.0);
        }
        let g = self.gradient(k, w0)?;
        let hd = self.hvp(k, w0, delta)?;
        Ok(g.dot(delta) + 0.5 * delta.dot(&hd))
    }

    /// Minimizes the risk over the first `k` samples.
    ///
    /// Quadratic families solve the normal equations exactly (`init` is
    /// ignored). The MLP runs gradient descent with Armijo backtracking
    /// (slope constant `1e-4`, halving) until the gradient norm reaches
    /// `tol` or the iteration budget runs out; on non-convergence the best
    /// iterate seen is returned, flagged through its recorded gradient norm
    /// rather than an error.
    pub fn minimize(
        &self,
        k: usize,
        init: &Weights,
        tol: f64,
        max_iters: usize,
    ) -> Result<Weights> {
        self.check_count(k)?;
        if tol.is_nan() || tol <= 0.0 {
            return Err(invalid_argument("minimize tolerance must be > 0"));
        }
        match &self.kind {
            Kind::Quadratic(f) => {
                let w = f.minimize_exact(k)?;
                let achieved = self.gradient(k, &w)?.norm2();
                Ok(Weights {
                    w,
                    provenance: Provenance::Minimizer {
                        k,
                        grad_norm_achieved: achieved,
                    },
                })
            }
            Kind::Mlp(_) => self.minimize_gd(k, init, tol, max_iters),
        }
    }

    fn minimize_gd(&self, k: usize, init: &Weights, tol: f64, max_iters: usize) -> Result<Weights> {
        const ARMIJO_C: f64 = 1e-4;
        const MAX_HALVINGS: usize = 60;

        let mut w = init.w.clone();
        let mut f = self.empirical_risk(k, &w)?;
        let mut g = self.gradient(k, &w)?;
        let mut gnorm = g.norm2();
        let mut best_w = w.clone();
        let mut best_gnorm = gnorm;
        let mut step = 1.0_f64;

        for _ in 0..max_iters {
            if gnorm <= tol {
                break;
            }
            let slope = gnorm * gnorm;
            let mut alpha = step;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let mut cand = w.clone();
                cand.axpy_mut(-alpha, &g);
                let fc = self.empirical_risk(k, &cand)?;
                if fc <= f - ARMIJO_C * alpha * slope {
                    w = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Descent stalled at rounding level.
                break;
            }
            step = (alpha * 2.0).min(1e4);
            g = self.gradient(k, &w)?;
            gnorm = g.norm2();
            if gnorm < best_gnorm {
                best_gnorm = gnorm;
                best_w = w.clone();
            }
        }

        let (w, achieved) = if gnorm <= tol {
            (w, gnorm)
        } else {
            (best_w, best_gnorm)
        };
        Ok(Weights {
            w,
            provenance: Provenance::Minimizer {
                k,
                grad_norm_achieved: achieved,
            },
        })
    }

    /// Deterministic starting point for iterative minimization: zeros for
    /// the quadratic family, fan-in scaled Gaussian draws for the MLP.
    pub fn initial_weights(&self, seed: u64) -> Weights {
        match &self.kind {
            Kind::Quadratic(f) => Weights::initial(Vector::zeros(f.dimension())),
            Kind::Mlp(f) => {
                let mut rng = RngStream::new(seed, 0);
                let mut w = Vec::with_capacity(f.dimension());
                for win in f.layers().windows(2) {
                    let (cols, rows) = (win[0], win[1]);
                    let scale = 1.0 / (cols as f64).sqrt();
                    for _ in 0..rows * cols {
                        w.push(scale * rng.next_std_normal());
                    }
                    w.extend(std::iter::repeat_n(0.0, rows));
                }
                Weights::initial(Vector::new(w).expect("finite init"))
            }
        }
    }
}
