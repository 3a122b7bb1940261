//! Stabilization criteria and their estimators.
//!
//! The observable is the one-sample increment field
//! `L_{k+1}(w) - L_k(w)` near a minimizer `w*` of `L_k`. A criterion pairs an
//! aggregation order with a probing law:
//!
//! - [`delta1`]: absolute increment at the point `w*` itself.
//! - [`delta_p_mc`]: Monte Carlo `p`-th absolute moment under a Gaussian
//!   probe, either isotropic in the full space or restricted to a
//!   curvature-aligned subspace.
//! - [`direct_mc`]: the mean-squared subspace criterion, sampled directly.
//!
//! Restricted to the top-D eigenspace, the increment is locally the quadratic
//! form `a + c^T z + 1/2 z^T B z` in subspace coordinates; [`surrogate_coeffs`]
//! compresses a family to these `(a, c, B)` coefficients with `2D`
//! Hessian-vector products, after which [`quad_mc`] samples the surrogate and
//! [`gm_closed_form`] evaluates its expectation exactly via Gaussian moments.
//! [`spectral_closed_form`] and [`extremality_argmax`] cover the regime where
//! `B` is diagonal in a stable eigenbasis, and [`rate_bound`] gives the
//! `O(k^-2)` ceiling implied by uniformly bounded per-sample losses,
//! gradients, and Hessians.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{spectral_norm_estimate, SubspaceBasis};
use crate::error::{invalid_argument, Error, Result};
use crate::loss_family::{LossFamily, Weights};
use crate::numerics::{derive_seed, RngStream, SymMatrix, Vector, DENSE_SIZE_LIMIT};

/// Which estimator produced a [`CriterionEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Delta1,
    DeltaPMc,
    DirectMc,
    QuadMc,
    GmClosedForm,
    SpectralClosedForm,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Delta1 => "delta1",
            EstimatorKind::DeltaPMc => "delta_p_mc",
            EstimatorKind::DirectMc => "direct_mc",
            EstimatorKind::QuadMc => "quad_mc",
            EstimatorKind::GmClosedForm => "gm_closed_form",
            EstimatorKind::SpectralClosedForm => "spectral_closed_form",
        }
    }
}

/// An estimated criterion value.
///
/// `std_error` is the sample standard deviation of the Monte Carlo draws
/// divided by `sqrt(samples)`; closed forms and the point criterion report
/// zero samples and zero standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionEstimate {
    pub value: f64,
    pub estimator: EstimatorKind,
    pub samples: usize,
    pub std_error: f64,
    pub seed: u64,
}

impl CriterionEstimate {
    fn closed_form(value: f64, estimator: EstimatorKind) -> Self {
        CriterionEstimate {
            value,
            estimator,
            samples: 0,
            std_error: 0.0,
            seed: 0,
        }
    }

    /// Root-sum-square of two standard errors, for pairwise comparisons.
    pub fn combined_std_error(&self, other: &CriterionEstimate) -> f64 {
        (self.std_error * self.std_error + other.std_error * other.std_error).sqrt()
    }
}

/// Probing law for [`delta_p_mc`].
#[derive(Debug, Clone)]
pub enum Probe<'a> {
    /// Point mass at the center; handled by [`delta1`].
    Point,
    /// Isotropic Gaussian `N(center, sigma^2 I_N)`.
    FullGaussian { sigma: f64 },
    /// Gaussian over the subspace: `w = center + U_D z`,
    /// `z ~ N(0, sigma^2 I_D)`.
    SubspaceGaussian {
        sigma: f64,
        basis: &'a SubspaceBasis,
    },
}

/// Compressed coefficients of the local quadratic surrogate on a subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCoefficients {
    /// Value gap `L_{k+1}(w*) - L_k(w*)`.
    #[serde(rename = "a_k")]
    pub a: f64,
    /// Projected next-risk gradient `U_D^T g^(k+1)(w*)`.
    #[serde(rename = "c_k")]
    pub c: Vector,
    /// Compressed Hessian difference `U_D^T (H^(k+1) - H^(k)) U_D`.
    #[serde(rename = "B_k")]
    pub b: SymMatrix,
    pub sigma: f64,
    pub k: usize,
    /// Gradient norm actually achieved at `w*`; stationarity of `L_k` holds
    /// only up to this value.
    pub achieved_grad_norm: f64,
}

impl SurrogateCoefficients {
    pub fn d(&self) -> usize {
        self.c.len()
    }

    /// Same coefficients under a different probe scale. `a`, `c`, and `b`
    /// do not depend on sigma, so scale sweeps reuse one assembly.
    pub fn with_sigma(&self, sigma: f64) -> SurrogateCoefficients {
        let mut out = self.clone();
        out.sigma = sigma;
        out
    }
}

/// Empirical counterparts of the uniform boundedness constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Largest per-sample loss magnitude at `w*` over the first `k+1` samples.
    pub m_loss: f64,
    /// Norm of the incoming sample's gradient at `w*`.
    pub m_grad: f64,
    /// Largest per-sample Hessian spectral norm at `w*`.
    pub m_hess: f64,
}

/// Monte Carlo mean and standard error over `s` independent draws.
///
/// Draw `i` reads stream `(seed, i)`, so the result is identical for any
/// execution order or degree of parallelism; the reduction is sequential
/// over the ordered per-draw values.
fn mc_mean_se<F>(s: usize, seed: u64, integrand: F) -> Result<(f64, f64)>
where
    F: Fn(u64, &mut RngStream) -> Result<f64> + Sync,
{
    if s < 2 {
        return Err(invalid_argument("Monte Carlo needs at least 2 samples"));
    }
    let values: Result<Vec<f64>> = (0..s as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i);
            integrand(i, &mut rng)
        })
        .collect();
    let values = values?;
    let mean = values.iter().sum::<f64>() / s as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (s - 1) as f64;
    Ok((mean, (var / s as f64).sqrt()))
}

/// Point criterion: `|L_{k+1}(w*) - L_k(w*)|`.
pub fn delta1(family: &LossFamily, k: usize, w_star: &Weights) -> Result<CriterionEstimate> {
    let value = family.increment(k, &w_star.w)?.abs();
    Ok(CriterionEstimate::closed_form(value, EstimatorKind::Delta1))
}

fn gaussian_point(center: &Vector, sigma: f64, rng: &mut RngStream) -> Result<Vector> {
    let mut w = center.clone();
    let xi = rng.sample_std_normal(center.len())?;
    w.axpy_mut(sigma, &xi);
    Ok(w)
}

fn subspace_point(
    center: &Vector,
    basis: &SubspaceBasis,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<Vector> {
    let z = rng.sample_std_normal(basis.d())?;
    let mut w = center.clone();
    for (zj, u) in z.iter().zip(basis.vectors()) {
        w.axpy_mut(sigma * zj, u);
    }
    Ok(w)
}

/// Monte Carlo estimate of the `p`-th absolute moment of the increment
/// field under a Gaussian probe.
///
/// With `p = 2` and a subspace probe this shares the sampling path of
/// [`direct_mc`]: the same seed produces the identical estimate.
pub fn delta_p_mc(
    family: &LossFamily,
    k: usize,
    center: &Weights,
    probe: &Probe<'_>,
    p: f64,
    s: usize,
    seed: u64,
) -> Result<CriterionEstimate> {
    if p < 1.0 {
        return Err(invalid_argument("aggregation order p must be >= 1"));
    }
    // Powers are applied so that p = 2 is bit-identical to squaring.
    let power = move |x: f64| -> f64 {
        if p == 2.0 {
            x * x
        } else if p == 1.0 {
            x.abs()
        } else {
            x.abs().powf(p)
        }
    };
    family.increment(k, &center.w)?; // validate ranges before the hot loop
    let (value, std_error) = match probe {
        Probe::Point => {
            return Err(invalid_argument(
                "point probe has no Monte Carlo form; use delta1",
            ))
        }
        Probe::FullGaussian { sigma } => {
            check_sigma(*sigma)?;
            mc_mean_se(s, seed, |_, rng| {
                let w = gaussian_point(&center.w, *sigma, rng)?;
                Ok(power(family.increment(k, &w)?))
            })?
        }
        Probe::SubspaceGaussian { sigma, basis } => {
            check_sigma(*sigma)?;
            check_basis(family, basis)?;
            mc_mean_se(s, seed, |_, rng| {
                let w = subspace_point(&center.w, basis, *sigma, rng)?;
                Ok(power(family.increment(k, &w)?))
            })?
        }
    };
    Ok(CriterionEstimate {
        value,
        estimator: EstimatorKind::DeltaPMc,
        samples: s,
        std_error,
        seed,
    })
}

/// Direct Monte Carlo estimate of the subspace mean-squared criterion:
/// draws `z ~ N(0, sigma^2 I_D)`, probes at `w* + U_D z`, and averages the
/// squared increments.
pub fn direct_mc(
    family: &LossFamily,
    k: usize,
    basis: &SubspaceBasis,
    center: &Weights,
    sigma: f64,
    s: usize,
    seed: u64,
) -> Result<CriterionEstimate> {
    check_sigma(sigma)?;
    check_basis(family, basis)?;
    family.increment(k, &center.w)?;
    let (value, std_error) = mc_mean_se(s, seed, |_, rng| {
        let w = subspace_point(&center.w, basis, sigma, rng)?;
        let inc = family.increment(k, &w)?;
        Ok(inc * inc)
    })?;
    Ok(CriterionEstimate {
        value,
        estimator: EstimatorKind::DirectMc,
        samples: s,
        std_error,
        seed,
    })
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(invalid_argument("probe scale sigma must be > 0"));
    }
    Ok(())
}

fn check_basis(family: &LossFamily, basis: &SubspaceBasis) -> Result<()> {
    if basis.n() != family.dimension() {
        return Err(invalid_argument(format!(
            "basis dimension {} does not match family dimension {}",
            basis.n(),
            family.dimension()
        )));
    }
    Ok(())
}

/// Assembles the surrogate coefficients `(a, c, B)` at `w*`.
///
/// `a` comes from the exact increment identity, `c` from one gradient of
/// `L_{k+1}` projected onto the basis, and `B` column by column from `D`
/// Hessian-vector products with `H^(k+1)` and `D` with `H^(k)`, the
/// projected difference symmetrized. Storage is `D^2`, never `N^2`.
pub fn surrogate_coeffs(
    family: &LossFamily,
    k: usize,
    w_star: &Weights,
    basis: &SubspaceBasis,
    sigma: f64,
) -> Result<SurrogateCoefficients> {
    check_sigma(sigma)?;
    check_basis(family, basis)?;
    let d = basis.d();
    let w = &w_star.w;

    let a = family.increment(k, w)?;
    let c = basis.project(&family.gradient(k + 1, w)?);

    let mut cols: Vec<Vector> = Vec::with_capacity(d);
    for u in basis.vectors() {
        let next = family.hvp(k + 1, w, u)?;
        let curr = family.hvp(k, w, u)?;
        cols.push(basis.project(&next.sub(&curr)));
    }
    let b = SymMatrix::from_fn(d, |i, j| cols[j][i]);

    let achieved_grad_norm = match w_star.achieved_grad_norm() {
        Some(g) => g,
        None => family.gradient(k, w)?.norm2(),
    };
    Ok(SurrogateCoefficients {
        a,
        c,
        b,
        sigma,
        k,
        achieved_grad_norm,
    })
}

/// Monte Carlo average of the squared quadratic surrogate
/// `(a + c^T z + 1/2 z^T B z)^2`; cost per draw is `O(D^2)`, independent
/// of the family dimension.
pub fn quad_mc(coeffs: &SurrogateCoefficients, s: usize, seed: u64) -> Result<CriterionEstimate> {
    let d = coeffs.d();
    let sigma = coeffs.sigma;
    let (value, std_error) = mc_mean_se(s, seed, |_, rng| {
        let z = rng.sample_std_normal(d)?.scale(sigma);
        let v = coeffs.a + coeffs.c.dot(&z) + 0.5 * coeffs.b.quad_form(&z);
        Ok(v * v)
    })?;
    Ok(CriterionEstimate {
        value,
        estimator: EstimatorKind::QuadMc,
        samples: s,
        std_error,
        seed,
    })
}

/// Closed-form expectation of the squared quadratic surrogate under the
/// Gaussian probe:
/// `a^2 + a sigma^2 Tr(B) + sigma^2 ||c||^2
///  + sigma^4/4 (2 Tr(B^2) + Tr(B)^2)`.
///
/// The cross term can be negative; the total is an expectation of a square,
/// so anything below zero by more than accumulated rounding is a bug and the
/// tiny remainder is clamped.
pub fn gm_closed_form(coeffs: &SurrogateCoefficients) -> CriterionEstimate {
    let s2 = coeffs.sigma * coeffs.sigma;
    let tr = coeffs.b.trace();
    let tr_sq = coeffs.b.trace_of_square();
    let t_value = coeffs.a * coeffs.a;
    let t_cross = coeffs.a * s2 * tr;
    let t_linear = s2 * coeffs.c.dot(&coeffs.c);
    let t_quad = 0.25 * s2 * s2 * (2.0 * tr_sq + tr * tr);

    let value = t_value + t_cross + t_linear + t_quad;
    let scale = t_value.abs() + t_cross.abs() + t_linear.abs() + t_quad.abs();
    assert!(
        value >= -1e-12 * scale,
        "closed form produced a negative expectation of a square: {value}"
    );
    CriterionEstimate::closed_form(value.max(0.0), EstimatorKind::GmClosedForm)
}

/// Pure quadratic criterion from leading eigenvalue increments:
/// `sigma^4/4 (2 sum delta_i^2 + (sum delta_i)^2)`.
///
/// This is [`gm_closed_form`] specialized to `a = 0`, `c = 0`, and `B`
/// diagonal in a stable principal basis.
pub fn spectral_closed_form(deltas: &Vector, sigma: f64) -> CriterionEstimate {
    let sum: f64 = deltas.iter().sum();
    let sum_sq: f64 = deltas.iter().map(|d| d * d).sum();
    let s2 = sigma * sigma;
    let value = 0.25 * s2 * s2 * (2.0 * sum_sq + sum * sum);
    CriterionEstimate::closed_form(value, EstimatorKind::SpectralClosedForm)
}

const EXTREMALITY_SIZE_LIMIT: usize = 20;

/// Brute-force maximizer of the pure quadratic signal over eigenindex sets.
///
/// For sorted non-negative increments `delta_1 >= ... >= delta_n >= 0`,
/// enumerates every size-`d` index set `I`, evaluates
/// `F(I) = 2 sum_{i in I} delta_i^2 + (sum_{i in I} delta_i)^2`, and returns
/// the lexicographically smallest argmax with its `F` value. The top-`d` set
/// `{0, .., d-1}` always wins; this enumeration is the independent check of
/// that fact.
pub fn extremality_argmax(deltas: &Vector, d: usize) -> Result<(Vec<usize>, f64)> {
    let n = deltas.len();
    if n > EXTREMALITY_SIZE_LIMIT {
        return Err(Error::SizeLimit {
            what: "extremality enumeration size",
            actual: n,
            limit: EXTREMALITY_SIZE_LIMIT,
        });
    }
    if d == 0 || d > n {
        return Err(invalid_argument("subset size d must satisfy 1 <= d <= n"));
    }
    for i in 0..n {
        if deltas[i] < 0.0 {
            return Err(invalid_argument("increments must be non-negative"));
        }
        if i > 0 && deltas[i - 1] < deltas[i] {
            return Err(invalid_argument("increments must be sorted non-increasing"));
        }
    }

    let f_of = |set: &[usize]| -> f64 {
        let sum: f64 = set.iter().map(|&i| deltas[i]).sum();
        let sum_sq: f64 = set.iter().map(|&i| deltas[i] * deltas[i]).sum();
        2.0 * sum_sq + sum * sum
    };

    // Lexicographic enumeration; strict improvement keeps the first
    // (smallest) argmax on ties.
    let mut set: Vec<usize> = (0..d).collect();
    let mut best_set = set.clone();
    let mut best_f = f_of(&set);
    loop {
        // Advance to the next combination, or finish.
        let mut i = d;
        loop {
            if i == 0 {
                debug_assert_eq!(best_set, (0..d).collect::<Vec<_>>());
                return Ok((best_set, best_f));
            }
            i -= 1;
            if set[i] != i + n - d {
                break;
            }
        }
        set[i] += 1;
        for j in i + 1..d {
            set[j] = set[j - 1] + 1;
        }
        let f = f_of(&set);
        if f > best_f {
            best_f = f;
            best_set = set.clone();
        }
    }
}

/// Empirical boundedness constants at `w*` over the first `k+1` samples:
/// the largest per-sample loss magnitude, the incoming sample's gradient
/// norm, and the largest per-sample Hessian spectral norm (power iteration
/// on per-sample Hessian-vector products).
pub fn empirical_bound_constants(
    family: &LossFamily,
    k: usize,
    w_star: &Weights,
) -> Result<BoundConstants> {
    family.increment(k, &w_star.w)?; // validates k and k+1
    let w = &w_star.w;
    let n = family.dimension();

    let mut m_loss = 0.0_f64;
    for i in 0..=k {
        m_loss = m_loss.max(family.per_sample_loss(i, w)?.abs());
    }
    let m_grad = family.per_sample_gradient(k, w)?.norm2();

    let mut m_hess = 0.0_f64;
    for i in 0..=k {
        let op = |v: &Vector| family.per_sample_hvp(i, w, v).expect("validated sample");
        let seed = derive_seed(0xb0c4, &format!("per-sample-norm/{i}"));
        m_hess = m_hess.max(spectral_norm_estimate(op, n, 300, 1e-10, seed)?);
    }
    Ok(BoundConstants {
        m_loss,
        m_grad,
        m_hess,
    })
}

/// Mean-squared rate ceiling for the subspace criterion:
/// `(12 M_l^2 + 3 sigma^2 M_g^2 + 3 sigma^4 (D^2 + 2D) M_H^2) / (k+1)^2`.
pub fn rate_bound(c: &BoundConstants, sigma: f64, d: usize, k: usize) -> f64 {
    let s2 = sigma * sigma;
    let dd = d as f64;
    let numer = 12.0 * c.m_loss * c.m_loss
        + 3.0 * s2 * c.m_grad * c.m_grad
        + 3.0 * s2 * s2 * (dd * dd + 2.0 * dd) * c.m_hess * c.m_hess;
    let kp1 = (k + 1) as f64;
    numer / (kp1 * kp1)
}

/// Full-space closed-form reference for the isotropic mean-squared
/// criterion: the Gaussian-moment formula applied with the identity basis,
/// so `c` is the whole next-risk gradient and `B` the dense Hessian
/// difference. Only valid at dense sizes; exact for quadratic families.
pub fn full_space_gm(
    family: &LossFamily,
    k: usize,
    w_star: &Weights,
    sigma: f64,
) -> Result<CriterionEstimate> {
    check_sigma(sigma)?;
    let n = family.dimension();
    if n > DENSE_SIZE_LIMIT {
        return Err(Error::SizeLimit {
            what: "full-space closed form dimension",
            actual: n,
            limit: DENSE_SIZE_LIMIT,
        });
    }
    let w = &w_star.w;
    let a = family.increment(k, w)?;
    let c = family.gradient(k + 1, w)?;
    let h_next = family.dense_hessian_oracle(k + 1, w)?;
    let h_curr = family.dense_hessian_oracle(k, w)?;
    let b = h_next.sub(&h_curr);

    let coeffs = SurrogateCoefficients {
        a,
        c,
        b,
        sigma,
        k,
        achieved_grad_norm: match w_star.achieved_grad_norm() {
            Some(g) => g,
            None => family.gradient(k, w)?.norm2(),
        },
    };
    Ok(gm_closed_form(&coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{top_d_eigenpairs, EigSolverConfig};
    use crate::loss_family::QuadraticFamily;

    fn one_d_scaled(qs: &[f64]) -> LossFamily {
        let n = qs.len();
        LossFamily::from_quadratic(
            QuadraticFamily::from_diagonal_parts(
                vec![Vector::zeros(1); n],
                qs.iter().map(|&q| Vector::new(vec![q]).unwrap()).collect(),
                vec![0.0; n],
            )
            .unwrap(),
        )
    }

    fn one_d_centers(centers: &[f64]) -> LossFamily {
        let n = centers.len();
        LossFamily::from_quadratic(
            QuadraticFamily::from_diagonal_parts(
                centers
                    .iter()
                    .map(|&m| Vector::new(vec![m]).unwrap())
                    .collect(),
                vec![Vector::new(vec![1.0]).unwrap(); n],
                vec![0.0; n],
            )
            .unwrap(),
        )
    }

    fn unit_basis_1d() -> SubspaceBasis {
        SubspaceBasis::from_dense_oracle(&SymMatrix::identity(1), 1).unwrap()
    }

    fn coeffs(a: f64, c: Vec<f64>, b: SymMatrix, sigma: f64) -> SurrogateCoefficients {
        SurrogateCoefficients {
            a,
            c: Vector::new(c).unwrap(),
            b,
            sigma,
            k: 1,
            achieved_grad_norm: 0.0,
        }
    }

    #[test]
    fn delta1_hand_examples() {
        let f = one_d_centers(&[0.0, 2.0]);
        let w = Weights::initial(Vector::zeros(1));
        assert_eq!(delta1(&f, 1, &w).unwrap().value, 1.0);

        let f = one_d_centers(&[0.0, 2.0, 1.0]);
        let w = Weights::initial(Vector::new(vec![1.0]).unwrap());
        let est = delta1(&f, 2, &w).unwrap();
        assert!((est.value - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(est.samples, 0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn surrogate_coefficients_one_d_hand_example() {
        // Curvatures 1 and 3, centers 0: at w* = 0 the value gap and
        // projected gradient vanish and the compressed Hessian difference is
        // (mean of first 2) - (first 1) = 2 - 1 = 1, matching the identity
        // (H_2 - H^(1)) / (k + 1) = (3 - 1) / 2.
        let f = one_d_scaled(&[1.0, 3.0]);
        let w = Weights::initial(Vector::zeros(1));
        let basis = unit_basis_1d();
        let sc = surrogate_coeffs(&f, 1, &w, &basis, 1e-3).unwrap();
        assert_eq!(sc.a, 0.0);
        assert_eq!(sc.c.as_slice(), &[0.0]);
        assert!((sc.b.get(0, 0) - 1.0).abs() < 1e-12);

        let e = Vector::new(vec![1.0]).unwrap();
        let h_fresh = f.per_sample_hvp(1, &w.w, &e).unwrap()[0];
        let h_curr = f.hvp(1, &w.w, &e).unwrap()[0];
        assert!((sc.b.get(0, 0) - (h_fresh - h_curr) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_matches_dense_difference() {
        let spec =
            crate::loss_family::FamilySpec::Quadratic(crate::loss_family::QuadraticFamilySpec {
                dimension: 40,
                max_samples: 9,
                seed: 31,
                spectrum: crate::loss_family::SpectrumLaw::LogUniform {
                    range: [0.05, 6.0],
                    jitter: 0.05,
                },
                basis: crate::loss_family::BasisKind::SharedRotation,
                center_scale: 1.0,
                offset_scale: 0.2,
                ridge: 1e-6,
            });
        let f = LossFamily::generate(&spec).unwrap();
        let k = 8;
        let w = f.minimize(k, &f.initial_weights(0), 1e-10, 0).unwrap();
        let h = f.dense_hessian_oracle(k, &w.w).unwrap();
        let basis = SubspaceBasis::from_dense_oracle(&h, 5).unwrap();
        let sc = surrogate_coeffs(&f, k, &w, &basis, 1e-3).unwrap();

        let dense_diff = f
            .dense_hessian_oracle(k + 1, &w.w)
            .unwrap()
            .sub(&f.dense_hessian_oracle(k, &w.w).unwrap());
        let projected = dense_diff.project(basis.vectors());
        let mut err = 0.0_f64;
        for i in 0..5 {
            for j in 0..5 {
                err = err.max((sc.b.get(i, j) - projected.get(i, j)).abs());
            }
        }
        assert!(err <= 1e-10, "compressed Hessian difference error {err}");
    }

    #[test]
    fn identical_samples_zero_coefficients() {
        let f = one_d_scaled(&[2.0, 2.0, 2.0]);
        let w = Weights::initial(Vector::zeros(1));
        let sc = surrogate_coeffs(&f, 2, &w, &unit_basis_1d(), 0.1).unwrap();
        assert_eq!(sc.a, 0.0);
        assert_eq!(sc.c.as_slice(), &[0.0]);
        assert_eq!(sc.b.get(0, 0), 0.0);
    }

    #[test]
    fn direct_mc_one_d_closed_form() {
        // Curvatures 1 and 3 at center 0: a = 0, c = 0, B = 1, so the
        // criterion is sigma^4/4 * (2 + 1) = 0.75 sigma^4.
        let f = one_d_scaled(&[1.0, 3.0]);
        let w = Weights::initial(Vector::zeros(1));
        let basis = unit_basis_1d();
        let sigma = 0.5;
        let sc = surrogate_coeffs(&f, 1, &w, &basis, sigma).unwrap();
        let gm = gm_closed_form(&sc);
        let expect = 0.75 * sigma.powi(4);
        assert!((gm.value - expect).abs() <= 1e-14 * expect);

        let est = direct_mc(&f, 1, &basis, &w, sigma, 20_000, 99).unwrap();
        assert!(
            (est.value - expect).abs() <= 4.0 * est.std_error,
            "direct {} vs closed form {expect} (se {})",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn quad_mc_constant_and_pure_quartic() {
        let sc = coeffs(1.0, vec![0.0], SymMatrix::zeros(1), 2.0);
        let est = quad_mc(&sc, 100, 5).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.std_error, 0.0);

        // a = 0, c = 0, B = diag(2), sigma = 1: E[(z^2)^2] = 3.
        let sc = coeffs(
            0.0,
            vec![0.0],
            SymMatrix::diag(&Vector::new(vec![2.0]).unwrap()),
            1.0,
        );
        let est = quad_mc(&sc, 1_000_000, 6).unwrap();
        assert!(
            (est.value - 3.0).abs() <= 5.0 * est.std_error,
            "{} vs 3 (se {})",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn gm_closed_form_hand_values() {
        let sc = coeffs(1.0, vec![0.0], SymMatrix::zeros(1), 0.37);
        assert_eq!(gm_closed_form(&sc).value, 1.0);

        let sc = coeffs(0.0, vec![1.0, 0.0], SymMatrix::zeros(2), 0.5);
        assert!((gm_closed_form(&sc).value - 0.25).abs() < 1e-15);

        // a = 1, c = (1), B = (2), sigma = 1: 1 + 2 + 1 + 3 = 7.
        let sc = coeffs(
            1.0,
            vec![1.0],
            SymMatrix::diag(&Vector::new(vec![2.0]).unwrap()),
            1.0,
        );
        let gm = gm_closed_form(&sc);
        assert!((gm.value - 7.0).abs() < 1e-14);
        let mc = quad_mc(&sc, 200_000, 12).unwrap();
        assert!((mc.value - 7.0).abs() <= 5.0 * mc.std_error);
    }

    #[test]
    fn spectral_closed_form_hand_values() {
        assert_eq!(spectral_closed_form(&Vector::zeros(3), 1.0).value, 0.0);

        let v = Vector::new(vec![1.0, 1.0]).unwrap();
        assert!((spectral_closed_form(&v, 1.0).value - 2.0).abs() < 1e-15);

        let v = Vector::new(vec![3.0]).unwrap();
        let spec = spectral_closed_form(&v, 1.0);
        assert!((spec.value - 6.75).abs() < 1e-15);
        let gm = gm_closed_form(&coeffs(
            0.0,
            vec![0.0],
            SymMatrix::diag(&Vector::new(vec![3.0]).unwrap()),
            1.0,
        ));
        assert_eq!(spec.value, gm.value);
    }

    #[test]
    fn gm_with_diagonal_b_equals_spectral_exactly() {
        let mut rng = RngStream::new(77, 0);
        for _ in 0..50 {
            let d = 1 + (rng.uniform(0.0, 10.0) as usize).min(9);
            let diag = Vector::from_fn(d, |_| rng.uniform(0.0, 3.0));
            let sigma = rng.uniform(0.1, 2.0);
            let gm = gm_closed_form(&coeffs(0.0, vec![0.0; d], SymMatrix::diag(&diag), sigma));
            let sp = spectral_closed_form(&diag, sigma);
            let denom = sp.value.max(1e-300);
            assert!((gm.value - sp.value).abs() <= 1e-12 * denom);
        }
    }

    #[test]
    fn extremality_hand_examples() {
        let d = Vector::new(vec![3.0, 2.0, 1.0]).unwrap();
        let (set, f) = extremality_argmax(&d, 2).unwrap();
        assert_eq!(set, vec![0, 1]);
        assert_eq!(f, 51.0); // competitors: {0,2} -> 36, {1,2} -> 19

        let d = Vector::new(vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let (set, _) = extremality_argmax(&d, 2).unwrap();
        assert_eq!(set, vec![0, 1]); // tie broken toward the smallest set

        let d = Vector::new(vec![5.0, 0.0, 0.0, 0.0]).unwrap();
        let (set, f) = extremality_argmax(&d, 1).unwrap();
        assert_eq!(set, vec![0]);
        assert_eq!(f, 75.0);
    }

    #[test]
    fn extremality_input_validation() {
        let unsorted = Vector::new(vec![1.0, 2.0]).unwrap();
        assert!(extremality_argmax(&unsorted, 1).is_err());
        let negative = Vector::new(vec![1.0, -0.5]).unwrap();
        assert!(extremality_argmax(&negative, 1).is_err());
        let too_big = Vector::zeros(21);
        assert!(matches!(
            extremality_argmax(&too_big, 3),
            Err(Error::SizeLimit { .. })
        ));
    }

    #[test]
    fn bound_constants_hand_examples() {
        // Identical samples with constant loss at the probe point.
        let f = LossFamily::from_quadratic(
            QuadraticFamily::from_diagonal_parts(
                vec![Vector::zeros(1); 3],
                vec![Vector::new(vec![2.0]).unwrap(); 3],
                vec![0.4; 3],
            )
            .unwrap(),
        );
        let w = Weights::initial(Vector::zeros(1));
        let c = empirical_bound_constants(&f, 1, &w).unwrap();
        assert_eq!(c.m_loss, 0.4);
        assert_eq!(c.m_grad, 0.0);
        assert!((c.m_hess - 2.0).abs() < 1e-8);

        // Curvatures 1 and 3, centers 0, at w* = 0.
        let f = one_d_scaled(&[1.0, 3.0]);
        let c = empirical_bound_constants(&f, 1, &w).unwrap();
        assert_eq!(c.m_loss, 0.0);
        assert_eq!(c.m_grad, 0.0);
        assert!((c.m_hess - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rate_bound_hand_values() {
        let c = BoundConstants {
            m_loss: 1.0,
            m_grad: 1.0,
            m_hess: 1.0,
        };
        assert_eq!(rate_bound(&c, 1.0, 1, 1), 6.0);
        let zero = BoundConstants {
            m_loss: 0.0,
            m_grad: 0.0,
            m_hess: 0.0,
        };
        assert_eq!(rate_bound(&zero, 0.3, 4, 7), 0.0);
    }

    #[test]
    fn subspace_delta_p_equals_direct_mc_with_shared_seed() {
        let f = one_d_scaled(&[1.0, 3.0]);
        let w = Weights::initial(Vector::zeros(1));
        let basis = unit_basis_1d();
        let probe = Probe::SubspaceGaussian {
            sigma: 0.2,
            basis: &basis,
        };
        let a = delta_p_mc(&f, 1, &w, &probe, 2.0, 500, 321).unwrap();
        let b = direct_mc(&f, 1, &basis, &w, 0.2, 500, 321).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.std_error, b.std_error);
    }

    #[test]
    fn full_gaussian_matches_full_space_closed_form() {
        let spec =
            crate::loss_family::FamilySpec::Quadratic(crate::loss_family::QuadraticFamilySpec {
                dimension: 12,
                max_samples: 7,
                seed: 8,
                spectrum: crate::loss_family::SpectrumLaw::LogUniform {
                    range: [0.1, 4.0],
                    jitter: 0.1,
                },
                basis: crate::loss_family::BasisKind::SharedRotation,
                center_scale: 1.0,
                offset_scale: 0.2,
                ridge: 1e-6,
            });
        let f = LossFamily::generate(&spec).unwrap();
        let k = 4;
        let w = f.minimize(k, &f.initial_weights(0), 1e-10, 0).unwrap();
        let sigma = 1e-2;
        let oracle = full_space_gm(&f, k, &w, sigma).unwrap();
        let probe = Probe::FullGaussian { sigma };
        let est = delta_p_mc(&f, k, &w, &probe, 2.0, 50_000, 7170).unwrap();
        assert!(
            (est.value - oracle.value).abs() <= 4.0 * est.std_error,
            "mc {} vs oracle {} (se {})",
            est.value,
            oracle.value,
            est.std_error
        );
    }

    #[test]
    fn sigma_to_zero_collapses_to_value_gap() {
        // Offsets make the value gap nonzero.
        let f = LossFamily::from_quadratic(
            QuadraticFamily::from_diagonal_parts(
                vec![Vector::zeros(2); 3],
                vec![Vector::new(vec![1.0, 0.5]).unwrap(); 3],
                vec![0.1, 0.4, 0.3],
            )
            .unwrap(),
        );
        let k = 2;
        let w = f.minimize(k, &f.initial_weights(0), 1e-10, 0).unwrap();
        let a = f.increment(k, &w.w).unwrap();
        assert!(a != 0.0);
        let h = f.dense_hessian_oracle(k, &w.w).unwrap();
        let basis = SubspaceBasis::from_dense_oracle(&h, 2).unwrap();
        let sigma = 1e-8;

        let sc = surrogate_coeffs(&f, k, &w, &basis, sigma).unwrap();
        for est in [
            gm_closed_form(&sc),
            quad_mc(&sc, 4096, 3).unwrap(),
            direct_mc(&f, k, &basis, &w, sigma, 4096, 3).unwrap(),
        ] {
            let rel = (est.value - a * a).abs() / (a * a);
            assert!(rel <= 1e-4, "{:?}: relative departure {rel}", est.estimator);
        }
    }

    #[test]
    fn estimates_are_deterministic_and_nonnegative() {
        let f = one_d_scaled(&[1.0, 3.0]);
        let w = Weights::initial(Vector::zeros(1));
        let basis = unit_basis_1d();
        let a = direct_mc(&f, 1, &basis, &w, 0.3, 256, 11).unwrap();
        let b = direct_mc(&f, 1, &basis, &w, 0.3, 256, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.value >= 0.0);
    }

    #[test]
    fn identical_samples_estimate_exactly_zero() {
        // The increment field vanishes identically, so every probe returns
        // 0 with zero spread.
        let f = one_d_scaled(&[2.0, 2.0, 2.0]);
        let w = Weights::initial(Vector::new(vec![0.7]).unwrap());
        let basis = unit_basis_1d();
        let est = direct_mc(&f, 2, &basis, &w, 0.5, 128, 4).unwrap();
        assert_eq!((est.value, est.std_error), (0.0, 0.0));
        let probe = Probe::FullGaussian { sigma: 0.5 };
        let est = delta_p_mc(&f, 2, &w, &probe, 2.0, 128, 4).unwrap();
        assert_eq!((est.value, est.std_error), (0.0, 0.0));
    }

    #[test]
    fn quad_mc_converges_to_closed_form_over_sample_grid() {
        let mut rng = RngStream::new(2025, 0);
        for t in 0..20 {
            let d = 1 + t % 10;
            let a = rng.uniform(-1.0, 1.0);
            let c = rng.sample_std_normal(d).unwrap();
            let g = rng.sample_std_normal(d * d).unwrap();
            let b = SymMatrix::from_rows(d, g.as_slice().to_vec()).unwrap();
            let sigma = rng.uniform(0.1, 1.0);
            let sc = SurrogateCoefficients {
                a,
                c,
                b,
                sigma,
                k: 1,
                achieved_grad_norm: 0.0,
            };
            let gm = gm_closed_form(&sc);
            for s in [1_000usize, 10_000, 100_000] {
                let est = quad_mc(&sc, s, 1000 + t as u64).unwrap();
                assert!(
                    (est.value - gm.value).abs() <= 4.0 * est.std_error,
                    "set {t}, S = {s}: quad {} vs gm {} (se {})",
                    est.value,
                    gm.value,
                    est.std_error
                );
            }
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let f = one_d_scaled(&[1.0, 3.0]);
        let w = Weights::initial(Vector::zeros(1));
        let basis = unit_basis_1d();
        assert!(delta_p_mc(&f, 1, &w, &Probe::Point, 2.0, 16, 0).is_err());
        let probe = Probe::FullGaussian { sigma: 0.1 };
        assert!(delta_p_mc(&f, 1, &w, &probe, 0.5, 16, 0).is_err());
        assert!(direct_mc(&f, 1, &basis, &w, 0.0, 16, 0).is_err());
        assert!(direct_mc(&f, 1, &basis, &w, 0.1, 1, 0).is_err());
    }

    #[test]
    fn basis_from_power_iteration_feeds_estimators() {
        let spec =
            crate::loss_family::FamilySpec::Quadratic(crate::loss_family::QuadraticFamilySpec {
                dimension: 24,
                max_samples: 9,
                seed: 12,
                spectrum: crate::loss_family::SpectrumLaw::LogUniform {
                    range: [0.05, 8.0],
                    jitter: 0.05,
                },
                basis: crate::loss_family::BasisKind::SharedRotation,
                center_scale: 1.0,
                offset_scale: 0.1,
                ridge: 1e-6,
            });
        let f = LossFamily::generate(&spec).unwrap();
        let k = 8;
        let w = f.minimize(k, &f.initial_weights(0), 1e-10, 0).unwrap();
        let cfg = EigSolverConfig::new(4);
        let basis =
            top_d_eigenpairs(|v| f.hvp(k, &w.w, v).expect("hvp"), f.dimension(), &cfg).unwrap();
        let sigma = 1e-3;
        let sc = surrogate_coeffs(&f, k, &w, &basis, sigma).unwrap();
        let gm = gm_closed_form(&sc);
        let dir = direct_mc(&f, k, &basis, &w, sigma, 10_000, 41).unwrap();
        assert!(
            (dir.value - gm.value).abs() <= 4.0 * dir.std_error,
            "direct {} vs gm {} (se {})",
            dir.value,
            gm.value,
            dir.std_error
        );
    }
}
