//! Principal curvature subspace construction from Hessian-vector products.
//!
//! The top-D eigenpairs of an empirical Hessian are extracted matrix-free by
//! deflated power iteration: a spectral shift turns the algebraically largest
//! eigenvalues into the dominant ones, each eigenvector is found by power
//! iteration with re-orthogonalization against the pairs already extracted,
//! and every accepted pair is certified by a fresh residual measurement.
//! Other HVP-based iterative eigensolvers would satisfy the same contract;
//! power iteration is the simplest one that does.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, Error, Result};
use crate::numerics::{dense_sym_eigh, RngStream, SymMatrix, Vector};

/// Configuration for [`top_d_eigenpairs`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigSolverConfig {
    /// Number of eigenpairs to extract.
    pub d: usize,
    /// Power-iteration budget per eigenpair.
    pub max_iters: usize,
    /// Relative tolerance for Rayleigh-quotient convergence and for the
    /// certified residual bound `||H u - lambda u|| <= tol * (1 + |lambda_1|)`.
    pub tol: f64,
    /// Power iterations spent estimating the spectral-norm shift.
    pub shift_probes: usize,
    /// Seed for start vectors; eigenindex `j` draws from stream `j + 1`.
    pub seed: u64,
}

impl EigSolverConfig {
    pub fn new(d: usize) -> Self {
        EigSolverConfig {
            d,
            max_iters: 1000,
            tol: 1e-6,
            shift_probes: 10,
            seed: 0,
        }
    }
}

/// Orthonormal top-D eigenpairs of a symmetric operator.
///
/// Invariants, checked at construction and on load:
/// eigenvalues are sorted descending by algebraic value, the columns are
/// orthonormal to `1e-8`, and each certified residual satisfies
/// `residuals[i] <= tol * (1 + |lambda_1|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    n: usize,
    vectors: Vec<Vector>,
    eigenvalues: Vector,
    residuals: Vector,
    iterations_used: usize,
    hvp_calls: usize,
    wall_time_s: f64,
    tol: f64,
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    n: usize,
    d: usize,
    eigenvalues: Vec<f64>,
    residuals: Vec<f64>,
    iterations_used: usize,
    hvp_calls: usize,
    wall_time_s: f64,
    tol: f64,
}

impl SubspaceBasis {
    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        n: usize,
        vectors: Vec<Vector>,
        eigenvalues: Vector,
        residuals: Vector,
        iterations_used: usize,
        hvp_calls: usize,
        wall_time_s: f64,
        tol: f64,
    ) -> Result<Self> {
        let basis = SubspaceBasis {
            n,
            vectors,
            eigenvalues,
            residuals,
            iterations_used,
            hvp_calls,
            wall_time_s,
            tol,
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Checks the structural invariants, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        let d = self.vectors.len();
        if self.eigenvalues.len() != d || self.residuals.len() != d {
            return Err(invalid_argument("basis field lengths disagree"));
        }
        for u in &self.vectors {
            if u.len() != self.n {
                return Err(invalid_argument("basis vector length != n"));
            }
        }
        let mut gram_err = 0.0_f64;
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                let e = self.vectors[i].dot(&self.vectors[j]) - expect;
                gram_err += e * e;
            }
        }
        if gram_err.sqrt() > 1e-8 {
            return Err(invalid_argument(format!(
                "basis not orthonormal: ||U^T U - I||_F = {:.3e}",
                gram_err.sqrt()
            )));
        }
        for i in 1..d {
            if self.eigenvalues[i - 1] < self.eigenvalues[i] {
                return Err(invalid_argument("eigenvalues not sorted descending"));
            }
        }
        if d > 0 {
            let bound = self.tol * (1.0 + self.eigenvalues[0].abs());
            for i in 0..d {
                if self.residuals[i] > bound {
                    return Err(invalid_argument(format!(
                        "residual {i} = {:.3e} exceeds bound {bound:.3e}",
                        self.residuals[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[Vector] {
        &self.vectors
    }

    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }

    pub fn residuals(&self) -> &Vector {
        &self.residuals
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    pub fn hvp_calls(&self) -> usize {
        self.hvp_calls
    }

    pub fn wall_time_s(&self) -> f64 {
        self.wall_time_s
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// `U^T v`: coordinates of `v` in the subspace.
    pub fn project(&self, v: &Vector) -> Vector {
        Vector::from_fn(self.d(), |j| self.vectors[j].dot(v))
    }

    /// `U z`: lifts subspace coordinates back to parameter space.
    pub fn lift(&self, z: &[f64]) -> Vector {
        assert_eq!(z.len(), self.d(), "lift: coordinate length mismatch");
        let mut out = Vector::zeros(self.n);
        for (zj, u) in z.iter().zip(&self.vectors) {
            out.axpy_mut(*zj, u);
        }
        out
    }

    /// First `d` eigenpairs as a new basis (deflation order is nested).
    pub fn truncate(&self, d: usize) -> Result<SubspaceBasis> {
        if d > self.d() {
            return Err(invalid_argument(format!(
                "cannot truncate basis of size {} to {d}",
                self.d()
            )));
        }
        SubspaceBasis::from_parts(
            self.n,
            self.vectors[..d].to_vec(),
            Vector::from_fn(d, |i| self.eigenvalues[i]),
            Vector::from_fn(d, |i| self.residuals[i]),
            self.iterations_used,
            self.hvp_calls,
            self.wall_time_s,
            self.tol,
        )
    }

    /// Top-`d` eigenpairs straight from the dense oracle.
    ///
    /// Used where the full spectrum is needed anyway (for instance the
    /// subspace-versus-full-space comparison, which is restricted to dense
    /// sizes) or where near-degenerate trailing eigenvalues make power
    /// iteration impractical.
    pub fn from_dense_oracle(h: &SymMatrix, d: usize) -> Result<SubspaceBasis> {
        if d > h.n() {
            return Err(invalid_argument(format!(
                "subspace dimension {d} exceeds operator dimension {}",
                h.n()
            )));
        }
        let start = Instant::now();
        let (vals, vecs) = dense_sym_eigh(h)?;
        let vectors: Vec<Vector> = vecs.into_iter().take(d).collect();
        let eigenvalues = Vector::from_fn(d, |i| vals[i]);
        let residuals = Vector::from_fn(d, |i| {
            h.apply(&vectors[i]).sub(&vectors[i].scale(vals[i])).norm2()
        });
        SubspaceBasis::from_parts(
            h.n(),
            vectors,
            eigenvalues,
            residuals,
            0,
            0,
            start.elapsed().as_secs_f64(),
            1e-8,
        )
    }

    /// Writes `<stem>.json` (header) and `<stem>.f64le` (payload).
    ///
    /// The payload holds `d * n` little-endian `f64` values, row-major:
    /// basis vector `j` occupies bytes `[j*n*8, (j+1)*n*8)`.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let header = BasisHeader {
            n: self.n,
            d: self.d(),
            eigenvalues: self.eigenvalues.as_slice().to_vec(),
            residuals: self.residuals.as_slice().to_vec(),
            iterations_used: self.iterations_used,
            hvp_calls: self.hvp_calls,
            wall_time_s: self.wall_time_s,
            tol: self.tol,
        };
        let json_path = stem.with_extension("json");
        let payload_path = stem.with_extension("f64le");
        std::fs::write(&json_path, serde_json::to_string_pretty(&header)?)?;
        let mut payload = Vec::with_capacity(self.d() * self.n * 8);
        for u in &self.vectors {
            for x in u.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(&payload_path)?;
        f.write_all(&payload)?;
        Ok((json_path, payload_path))
    }

    /// Reads a basis written by [`SubspaceBasis::save`] and re-validates it.
    pub fn load(stem: &Path) -> Result<SubspaceBasis> {
        let json_path = stem.with_extension("json");
        let payload_path = stem.with_extension("f64le");
        let header: BasisHeader = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
            .map_err(|e| Error::CorruptFile {
                path: json_path.display().to_string(),
                detail: e.to_string(),
            })?;
        let mut payload = Vec::new();
        std::fs::File::open(&payload_path)?.read_to_end(&mut payload)?;
        let expect = header.d * header.n * 8;
        if payload.len() != expect {
            return Err(Error::CorruptFile {
                path: payload_path.display().to_string(),
                detail: format!("payload is {} bytes, expected {expect}", payload.len()),
            });
        }
        let mut vectors = Vec::with_capacity(header.d);
        for j in 0..header.d {
            let mut entries = Vec::with_capacity(header.n);
            for i in 0..header.n {
                let off = (j * header.n + i) * 8;
                let bytes: [u8; 8] = payload[off..off + 8].try_into().unwrap();
                entries.push(f64::from_le_bytes(bytes));
            }
            vectors.push(Vector::new(entries).map_err(|e| Error::CorruptFile {
                path: payload_path.display().to_string(),
                detail: e.to_string(),
            })?);
        }
        SubspaceBasis::from_parts(
            header.n,
            vectors,
            Vector::new(header.eigenvalues).map_err(|e| Error::CorruptFile {
                path: json_path.display().to_string(),
                detail: e.to_string(),
            })?,
            Vector::new(header.residuals).map_err(|e| Error::CorruptFile {
                path: json_path.display().to_string(),
                detail: e.to_string(),
            })?,
            header.iterations_used,
            header.hvp_calls,
            header.wall_time_s,
            header.tol,
        )
        .map_err(|e| Error::CorruptFile {
            path: json_path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Total Hessian-vector product invocations behind a basis.
pub fn hvp_call_count(basis: &SubspaceBasis) -> usize {
    basis.hvp_calls()
}

/// Top-D eigenpairs of a symmetric operator given only `v -> H v`.
///
/// The operator is assumed linear and symmetric; see
/// [`check_operator_symmetry`] for the statistical guard used in tests.
/// Eigenpairs are returned ordered by algebraic eigenvalue, largest first.
pub fn top_d_eigenpairs<F>(mut hvp_fn: F, n: usize, cfg: &EigSolverConfig) -> Result<SubspaceBasis>
where
    F: FnMut(&Vector) -> Vector,
{
    if cfg.d == 0 {
        return Err(invalid_argument("subspace dimension must be >= 1"));
    }
    if cfg.d > n {
        return Err(invalid_argument(format!(
            "subspace dimension {} exceeds operator dimension {n}",
            cfg.d
        )));
    }
    if cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(invalid_argument("eigensolver tolerance must be > 0"));
    }
    let start = Instant::now();
    let mut calls = 0usize;
    let mut iterations = 0usize;

    // Shift estimate: mu >= ||H||_2 makes the shifted operator H + mu I
    // positive semidefinite, so the magnitude-dominant eigenvalue of the
    // shifted operator is the algebraically largest eigenvalue of H.
    let mut probe_rng = RngStream::new(cfg.seed, 0);
    let mut v = probe_rng.sample_std_normal(n)?.normalized()?;
    let mut norm_est = 0.0_f64;
    for _ in 0..cfg.shift_probes {
        let hv = hvp_fn(&v);
        calls += 1;
        let rq = v.dot(&hv);
        let nrm = hv.norm2();
        norm_est = norm_est.max(rq.abs()).max(nrm);
        if nrm == 0.0 {
            break;
        }
        v = hv.scale(1.0 / nrm);
    }
    let mu = if norm_est > 0.0 { 1.1 * norm_est } else { 1.0 };

    let mut vectors: Vec<Vector> = Vec::with_capacity(cfg.d);
    let mut eigenvalues: Vec<f64> = Vec::with_capacity(cfg.d);
    let mut residuals: Vec<f64> = Vec::with_capacity(cfg.d);

    for j in 0..cfg.d {
        let mut rng = RngStream::new(cfg.seed, j as u64 + 1);
        let mut v = fresh_start(&mut rng, n, &vectors)?;
        let mut lambda_prev = f64::INFINITY;
        let mut accepted = false;
        let mut last_residual = f64::INFINITY;

        for _ in 0..cfg.max_iters {
            let hv = hvp_fn(&v);
            calls += 1;
            iterations += 1;
            let rq = v.dot(&hv);

            if (rq - lambda_prev).abs() <= cfg.tol * rq.abs().max(1.0) {
                // Rayleigh quotient has settled: certify with a fresh product.
                let cert = hvp_fn(&v);
                calls += 1;
                let lambda = v.dot(&cert);
                let resid = cert.sub(&v.scale(lambda)).norm2();
                last_residual = resid;
                let lambda1 = if j == 0 { lambda } else { eigenvalues[0] };
                if resid <= cfg.tol * (1.0 + lambda1.abs()) {
                    vectors.push(v.clone());
                    eigenvalues.push(lambda);
                    residuals.push(resid);
                    accepted = true;
                    break;
                }
            }
            lambda_prev = rq;

            // Shifted power step with deflation.
            let mut w = hv;
            w.axpy_mut(mu, &v);
            for u in &vectors {
                let c = w.dot(u);
                w.axpy_mut(-c, u);
            }
            match w.normalized() {
                Ok(next) => v = next,
                Err(_) => {
                    // Iterate collapsed into the deflated span; restart.
                    v = fresh_start(&mut rng, n, &vectors)?;
                    lambda_prev = f64::INFINITY;
                }
            }
        }

        if !accepted {
            let partial = SubspaceBasis::from_parts(
                n,
                vectors,
                Vector::new(eigenvalues)?,
                Vector::new(residuals)?,
                iterations,
                calls,
                start.elapsed().as_secs_f64(),
                cfg.tol,
            )?;
            return Err(Error::EigNonConvergence {
                index: j,
                iterations: cfg.max_iters,
                residual: last_residual,
                partial: Box::new(partial),
            });
        }
    }

    // Deflation extracts in descending order up to tolerance wobble; enforce
    // the ordering invariant exactly.
    let mut order: Vec<usize> = (0..cfg.d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let vectors: Vec<Vector> = order.iter().map(|&i| vectors[i].clone()).collect();
    let eigenvalues = Vector::from_fn(cfg.d, |r| eigenvalues[order[r]]);
    let residuals = Vector::from_fn(cfg.d, |r| residuals[order[r]]);

    SubspaceBasis::from_parts(
        n,
        vectors,
        eigenvalues,
        residuals,
        iterations,
        calls,
        start.elapsed().as_secs_f64(),
        cfg.tol,
    )
}

fn fresh_start(rng: &mut RngStream, n: usize, found: &[Vector]) -> Result<Vector> {
    for _ in 0..16 {
        let mut v = rng.sample_std_normal(n)?;
        for u in found {
            let c = v.dot(u);
            v.axpy_mut(-c, u);
        }
        if let Ok(unit) = v.normalized() {
            return Ok(unit);
        }
    }
    Err(invalid_argument(
        "could not draw a start vector outside the deflated span",
    ))
}

/// Estimates `||H||_2` of a symmetric operator by plain power iteration.
///
/// The estimate converges from below; callers needing an upper bound should
/// inflate it (the eigensolver uses a factor of 1.1).
pub fn spectral_norm_estimate<F>(
    mut hvp_fn: F,
    n: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&Vector) -> Vector,
{
    let mut rng = RngStream::new(seed, 0);
    let mut v = rng.sample_std_normal(n)?.normalized()?;
    let mut est = 0.0_f64;
    for _ in 0..max_iters {
        let hv = hvp_fn(&v);
        let nrm = hv.norm2();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        let prev = est;
        est = nrm;
        v = hv.scale(1.0 / nrm);
        if (est - prev).abs() <= tol * est.max(1e-300) {
            break;
        }
    }
    Ok(est)
}

/// Largest observed asymmetry `|u^T (H v) - v^T (H u)| / (||u|| ||v||)` over
/// random pairs. Symmetric operators score at rounding level; the
/// finite-difference MLP Hessian-vector product stays within its contract.
pub fn check_operator_symmetry<F>(mut hvp_fn: F, n: usize, trials: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&Vector) -> Vector,
{
    let mut worst = 0.0_f64;
    for t in 0..trials {
        let mut rng = RngStream::new(seed, t as u64);
        let u = rng.sample_std_normal(n)?;
        let v = rng.sample_std_normal(n)?;
        let hu = hvp_fn(&u);
        let hv = hvp_fn(&v);
        let asym = (u.dot(&hv) - v.dot(&hu)).abs() / (u.norm2() * v.norm2());
        worst = worst.max(asym);
    }
    Ok(worst)
}
