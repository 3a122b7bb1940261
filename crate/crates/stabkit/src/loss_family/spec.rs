//! Serializable family specifications and deterministic generation.
//!
//! A family spec is the unit the CLI reads and writes: generating from the
//! same spec always reproduces the identical family, so only the spec needs
//! to be stored. Sample growth is nested by construction: all `max_samples`
//! draws are fixed up front and the risk over `k` samples always uses the
//! first `k`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_argument, Result};
use crate::loss_family::mlp::{parameter_count, Activation, MlpFamily};
use crate::loss_family::quadratic::QuadraticFamily;
use crate::numerics::{random_orthogonal, RngStream, SymMatrix, Vector, DENSE_SIZE_LIMIT};

/// Eigenvalue law for the per-sample curvatures of a quadratic ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SpectrumLaw {
    /// `d_true` dominant eigenvalues geometrically spaced over `top`, the
    /// remainder drawn uniformly from `tail`. `jitter` is the log-scale
    /// per-sample spread of the dominant values.
    TopHeavy {
        d_true: usize,
        top: [f64; 2],
        tail: [f64; 2],
        jitter: f64,
    },
    /// All eigenvalues geometrically spaced over `range` with per-sample
    /// log-normal jitter; no degenerate clusters anywhere in the spectrum.
    LogUniform { range: [f64; 2], jitter: f64 },
    /// Every eigenvalue of sample `i` equals `value * exp(jitter * eta_i)`.
    Isotropic { value: f64, jitter: f64 },
    /// Deterministic alternation between two fixed spectra, with offsets
    /// alternating `+/- offset_scale`. Increments then decay exactly like
    /// `1/k`, which gives clean log-log decay slopes.
    TwoPhase {
        d_true: usize,
        top: [f64; 2],
        tail_value: f64,
        contrast: f64,
    },
}

/// How per-sample curvature eigenbases are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Eigenvectors are the coordinate axes; curvatures stay diagonal, so
    /// any dimension is affordable.
    Identity,
    /// One random orthogonal basis shared by every sample (dense storage,
    /// dimension capped at the dense limit).
    SharedRotation,
    /// A fresh random orthogonal basis per sample (dense storage).
    PerSampleRotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFamilySpec {
    pub dimension: usize,
    pub max_samples: usize,
    pub seed: u64,
    pub spectrum: SpectrumLaw,
    pub basis: BasisKind,
    /// Centers are drawn with norm about `center_scale` (zero pins every
    /// center, and hence every sequential minimizer, at the origin).
    pub center_scale: f64,
    /// Offsets are `offset_scale` times a standard normal (or the exact
    /// alternating value for the two-phase law).
    pub offset_scale: f64,
    /// Ridge added to every curvature so the mean curvature is positive
    /// definite and the minimizer solve is exact.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFamilySpec {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub max_samples: usize,
    pub seed: u64,
    /// Scale of the Gaussian inputs.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
    /// Standard deviation of the label noise added to the teacher output.
    pub noise_std: f64,
}

fn default_input_scale() -> f64 {
    1.0
}

/// A loss-family description, serializable as a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilySpec {
    Quadratic(QuadraticFamilySpec),
    Mlp(MlpFamilySpec),
}

impl FamilySpec {
    pub fn dimension(&self) -> usize {
        match self {
            FamilySpec::Quadratic(q) => q.dimension,
            FamilySpec::Mlp(m) => parameter_count(&m.layers),
        }
    }

    pub fn max_samples(&self) -> usize {
        match self {
            FamilySpec::Quadratic(q) => q.max_samples,
            FamilySpec::Mlp(m) => m.max_samples,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            FamilySpec::Quadratic(q) => q.seed,
            FamilySpec::Mlp(m) => m.seed,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            FamilySpec::Quadratic(_) => "quadratic",
            FamilySpec::Mlp(_) => "mlp",
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            FamilySpec::Quadratic(q) => q.seed = seed,
            FamilySpec::Mlp(m) => m.seed = seed,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FamilySpec::Quadratic(q) => {
                if q.dimension == 0 {
                    return Err(invalid_argument("dimension must be >= 1"));
                }
                if q.max_samples < 2 {
                    return Err(invalid_argument("max_samples must be >= 2"));
                }
                if q.ridge < 0.0 {
                    return Err(invalid_argument("ridge must be >= 0"));
                }
                if q.basis != BasisKind::Identity && q.dimension > DENSE_SIZE_LIMIT {
                    return Err(invalid_argument(format!(
                        "rotated bases require dimension <= {DENSE_SIZE_LIMIT}; \
                         use the identity basis for larger ensembles"
                    )));
                }
                match &q.spectrum {
                    SpectrumLaw::TopHeavy {
                        d_true, top, tail, ..
                    } => {
                        if *d_true == 0 || *d_true > q.dimension {
                            return Err(invalid_argument("d_true out of range"));
                        }
                        if !(0.0 < top[0] && top[0] <= top[1]) {
                            return Err(invalid_argument("top range must be 0 < lo <= hi"));
                        }
                        if !(0.0 <= tail[0] && tail[0] <= tail[1]) {
                            return Err(invalid_argument("tail range must be 0 <= lo <= hi"));
                        }
                    }
                    SpectrumLaw::LogUniform { range, .. } => {
                        if !(0.0 < range[0] && range[0] <= range[1]) {
                            return Err(invalid_argument("range must be 0 < lo <= hi"));
                        }
                    }
                    SpectrumLaw::Isotropic { value, .. } => {
                        if *value <= 0.0 {
                            return Err(invalid_argument("isotropic value must be > 0"));
                        }
                    }
                    SpectrumLaw::TwoPhase {
                        d_true,
                        top,
                        tail_value,
                        contrast,
                    } => {
                        if *d_true == 0 || *d_true > q.dimension {
                            return Err(invalid_argument("d_true out of range"));
                        }
                        if !(0.0 < top[0] && top[0] <= top[1]) {
                            return Err(invalid_argument("top range must be 0 < lo <= hi"));
                        }
                        if *tail_value < 0.0 || *contrast <= -1.0 {
                            return Err(invalid_argument("invalid two-phase parameters"));
                        }
                    }
                }
                Ok(())
            }
            FamilySpec::Mlp(m) => {
                if m.layers.len() < 2 || m.layers.contains(&0) {
                    return Err(invalid_argument(
                        "layers must list at least two nonzero sizes",
                    ));
                }
                if m.max_samples < 2 {
                    return Err(invalid_argument("max_samples must be >= 2"));
                }
                if m.noise_std < 0.0 || m.input_scale <= 0.0 {
                    return Err(invalid_argument(
                        "noise_std >= 0 and input_scale > 0 required",
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Content hash of a family spec, used as a cache key component.
pub fn family_hash(spec: &FamilySpec) -> String {
    let bytes = serde_json::to_vec(spec).expect("family spec serializes");
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(16);
    for b in digest.iter().take(8) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Geometric interpolation from `hi` down to `lo` over `n` values.
fn geomspace_desc(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    (0..n)
        .map(|j| hi * (lo / hi).powf(j as f64 / (n - 1) as f64))
        .collect()
}

/// Per-sample eigenvalues (descending base order) for sample `i`.
///
/// Stream draw order per sample is fixed: spectrum draws, then rotation
/// draws if any, then center draws, then the offset draw.
fn sample_eigenvalues(law: &SpectrumLaw, n: usize, i: usize, rng: &mut RngStream) -> Vec<f64> {
    match law {
        SpectrumLaw::TopHeavy {
            d_true,
            top,
            tail,
            jitter,
        } => {
            let base = geomspace_desc(top[0], top[1], *d_true);
            let mut vals = Vec::with_capacity(n);
            for b in base {
                vals.push(b * (jitter * rng.next_std_normal()).exp());
            }
            for _ in *d_true..n {
                vals.push(rng.uniform(tail[0], tail[1]));
            }
            vals
        }
        SpectrumLaw::LogUniform { range, jitter } => {
            let base = geomspace_desc(range[0], range[1], n);
            base.into_iter()
                .map(|b| b * (jitter * rng.next_std_normal()).exp())
                .collect()
        }
        SpectrumLaw::Isotropic { value, jitter } => {
            let v = value * (jitter * rng.next_std_normal()).exp();
            vec![v; n]
        }
        SpectrumLaw::TwoPhase {
            d_true,
            top,
            tail_value,
            contrast,
        } => {
            let factor = if i.is_multiple_of(2) {
                1.0
            } else {
                1.0 + contrast
            };
            let mut vals: Vec<f64> = geomspace_desc(top[0], top[1], *d_true)
                .into_iter()
                .map(|b| b * factor)
                .collect();
            vals.resize(n, *tail_value);
            vals
        }
    }
}

pub(crate) fn generate_quadratic(spec: &QuadraticFamilySpec) -> Result<QuadraticFamily> {
    let n = spec.dimension;
    let shared_basis = match spec.basis {
        BasisKind::SharedRotation => {
            let mut rng = RngStream::new(spec.seed, 0);
            Some(random_orthogonal(&mut rng, n)?)
        }
        _ => None,
    };

    let mut centers = Vec::with_capacity(spec.max_samples);
    let mut offsets = Vec::with_capacity(spec.max_samples);
    let mut diagonals: Vec<Vector> = Vec::new();
    let mut matrices: Vec<SymMatrix> = Vec::new();

    let center_norm = spec.center_scale / (n as f64).sqrt();
    for i in 0..spec.max_samples {
        let mut rng = RngStream::new(spec.seed, 1 + i as u64);
        let mut vals = sample_eigenvalues(&spec.spectrum, n, i, &mut rng);
        for v in &mut vals {
            *v += spec.ridge;
        }

        match spec.basis {
            BasisKind::Identity => {
                diagonals.push(Vector::new(vals)?);
            }
            BasisKind::SharedRotation | BasisKind::PerSampleRotation => {
                let own_basis;
                let basis = if let Some(b) = &shared_basis {
                    b
                } else {
                    own_basis = random_orthogonal(&mut rng, n)?;
                    &own_basis
                };
                let mut data = vec![0.0; n * n];
                for (l, u) in basis.iter().enumerate() {
                    let lam = vals[l];
                    for r in 0..n {
                        let ur = lam * u[r];
                        let row = &mut data[r * n..(r + 1) * n];
                        for (c, uc) in u.iter().enumerate() {
                            row[c] += ur * uc;
                        }
                    }
                }
                matrices.push(SymMatrix::from_rows(n, data)?);
            }
        }

        let gaussian = rng.sample_std_normal(n)?;
        centers.push(gaussian.scale(center_norm));

        let offset_draw = rng.next_std_normal();
        let offset = match &spec.spectrum {
            SpectrumLaw::TwoPhase { .. } => {
                if i % 2 == 0 {
                    spec.offset_scale
                } else {
                    -spec.offset_scale
                }
            }
            _ => spec.offset_scale * offset_draw,
        };
        offsets.push(offset);
    }

    match spec.basis {
        BasisKind::Identity => QuadraticFamily::from_diagonal_parts(centers, diagonals, offsets),
        _ => QuadraticFamily::from_parts(centers, matrices, offsets),
    }
}

pub(crate) fn generate_mlp(spec: &MlpFamilySpec) -> Result<MlpFamily> {
    let d_in = spec.layers[0];
    let d_out = *spec.layers.last().unwrap();

    // Teacher network drawn once from stream 0.
    let dim = parameter_count(&spec.layers);
    let mut teacher_w = Vec::with_capacity(dim);
    let mut rng = RngStream::new(spec.seed, 0);
    for win in spec.layers.windows(2) {
        let (cols, rows) = (win[0], win[1]);
        let w_scale = 1.5 / (cols as f64).sqrt();
        for _ in 0..rows * cols {
            teacher_w.push(w_scale * rng.next_std_normal());
        }
        for _ in 0..rows {
            teacher_w.push(0.5 * rng.next_std_normal());
        }
    }
    let teacher_w = Vector::new(teacher_w)?;

    // Probe family used only to evaluate the teacher forward pass.
    let probe = MlpFamily::new(
        spec.layers.clone(),
        spec.activation,
        vec![Vector::zeros(d_in)],
        vec![Vector::zeros(d_out)],
    )?;

    let mut inputs = Vec::with_capacity(spec.max_samples);
    let mut targets = Vec::with_capacity(spec.max_samples);
    for i in 0..spec.max_samples {
        let mut rng = RngStream::new(spec.seed, 1 + i as u64);
        let x = rng.sample_std_normal(d_in)?.scale(spec.input_scale);
        let mut y = probe.forward(&teacher_w, &x);
        for j in 0..d_out {
            y[j] += spec.noise_std * rng.next_std_normal();
        }
        inputs.push(x);
        targets.push(y);
    }
    MlpFamily::new(spec.layers.clone(), spec.activation, inputs, targets)
}
