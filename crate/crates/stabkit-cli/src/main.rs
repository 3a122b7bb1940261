//! Command-line front end.
//!
//! Subcommands `gen-family`, `subspace`, `criterion`, and `experiment` each
//! read one JSON config and write their results under an output directory,
//! together with a `run.json` manifest listing every output file with its
//! content hash. `--check` runs the verification suite instead.
//!
//! Exit codes: 0 on success, 1 on usage errors (with usage text on stderr),
//! 2 on runtime errors, reported as a single machine-parsable line
//! `error: <category>: <detail>`.

mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use stabkit::criteria::{
    delta1, delta_p_mc, direct_mc, gm_closed_form, quad_mc, surrogate_coeffs, CriterionEstimate,
    Probe,
};
use stabkit::curvature::{top_d_eigenpairs, EigSolverConfig, SubspaceBasis};
use stabkit::error::Error;
use stabkit::experiments::{
    emit_csv, run_decay, run_estimators, run_proxy_validity, run_ratio, zero_timings, RunOutput,
    SweepConfig,
};
use stabkit::loss_family::{family_hash, FamilySpec, LossFamily, Weights};

use manifest::{Manifest, OutputWriter};

/// Seed fallback read when neither `--seed` nor the config provides one.
const SEED_ENV: &str = "STABKIT_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "stabkit",
    version,
    about = "Loss-landscape stabilization criteria under one-sample growth",
    subcommand_negates_reqs = true
)]
struct Cli {
    /// Run the full verification suite and print a pass/fail table.
    #[arg(long)]
    check: bool,

    /// Seed override applied on top of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for Monte Carlo loops. Results do not depend on this;
    /// it only changes wall time.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Overwrite existing result files.
    #[arg(long, global = true)]
    force: bool,

    /// Determinism-check mode: timing columns are zeroed, one thread is
    /// used, and subspace caches are bypassed, so reruns with the same seed
    /// produce byte-identical CSVs.
    #[arg(long = "determinism-check", global = true)]
    determinism_check: bool,

    /// KEY=VALUE pairs applied onto the JSON config before it is parsed.
    /// Dotted keys descend into nested objects; values are parsed as JSON
    /// when possible and as strings otherwise.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a family config and write the canonical family spec file.
    GenFamily {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build (or load from cache) a principal curvature subspace.
    Subspace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one criterion estimate.
    Criterion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment sweep, writing CSV records and a JSON summary.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };

    let threads = if cli.determinism_check {
        1
    } else {
        cli.threads
    };
    if threads == 0 {
        eprintln!("error: config: --threads must be >= 1");
        return 2;
    }
    // Thread count only affects wall time; Monte Carlo draws are addressed
    // by sample index, so results are identical at any parallelism degree.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();

    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}");
            eprintln!("Usage: stabkit [--check] [OPTIONS] [COMMAND]");
            eprintln!("Try 'stabkit --help' for more information.");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}: {e}", e.category());
            2
        }
    }
}

fn run(mut cli: Cli) -> Result<(), CliError> {
    if cli.check {
        if cli.command.is_some() {
            return Err(CliError::Usage(
                "--check cannot be combined with a subcommand".into(),
            ));
        }
        let outcomes = stabkit::checks::run_all();
        print!("{}", stabkit::checks::render_table(&outcomes));
        if outcomes.iter().all(|o| o.passed) {
            return Ok(());
        }
        return Err(CliError::Runtime(Error::Config(
            "verification suite reported failures".into(),
        )));
    }

    let Some(command) = cli.command.take() else {
        return Err(CliError::Usage("missing subcommand".into()));
    };

    let t0 = Instant::now();
    match command {
        Command::GenFamily { config, out } => {
            let ctx = Context::load(&cli, &config, &out, "gen-family")?;
            gen_family(ctx, t0)
        }
        Command::Subspace { config, out } => {
            let ctx = Context::load(&cli, &config, &out, "subspace")?;
            subspace_cmd(ctx, t0)
        }
        Command::Criterion { config, out } => {
            let ctx = Context::load(&cli, &config, &out, "criterion")?;
            criterion_cmd(ctx, t0)
        }
        Command::Experiment { config, out } => {
            let ctx = Context::load(&cli, &config, &out, "experiment")?;
            experiment_cmd(ctx, t0)
        }
    }
}

/// Loaded config JSON with overrides and seed plumbing already applied.
struct Context {
    command: &'static str,
    config_path: PathBuf,
    config_dir: PathBuf,
    config_sha256: String,
    config: serde_json::Value,
    out_dir: PathBuf,
    seed: Option<u64>,
    force: bool,
    determinism_check: bool,
    threads: usize,
}

impl Context {
    fn load(
        cli: &Cli,
        config_path: &Path,
        out_dir: &Path,
        command: &'static str,
    ) -> Result<Self, CliError> {
        let bytes = std::fs::read(config_path).map_err(Error::from)?;
        let config_sha256 = manifest::sha256_hex(&bytes);
        let mut config: serde_json::Value = serde_json::from_slice(&bytes).map_err(Error::from)?;

        for pair in &cli.overrides {
            apply_override(&mut config, pair).map_err(CliError::Runtime)?;
        }

        // Seed precedence: --seed flag, then config, then environment.
        let mut seed = cli.seed;
        if let Some(obj) = config.as_object_mut() {
            if let Some(s) = seed {
                obj.insert("seed".into(), serde_json::json!(s));
            } else if let Some(s) = obj.get("seed").and_then(|v| v.as_u64()) {
                seed = Some(s);
            } else if let Ok(env) = std::env::var(SEED_ENV) {
                let s: u64 = env.parse().map_err(|_| {
                    CliError::Runtime(Error::Config(format!(
                        "{SEED_ENV} must be an unsigned integer, got {env:?}"
                    )))
                })?;
                obj.insert("seed".into(), serde_json::json!(s));
                seed = Some(s);
            }
        }

        std::fs::create_dir_all(out_dir).map_err(Error::from)?;
        Ok(Context {
            command,
            config_path: config_path.to_path_buf(),
            config_dir: config_path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
            config_sha256,
            config,
            out_dir: out_dir.to_path_buf(),
            seed,
            force: cli.force,
            determinism_check: cli.determinism_check,
            threads: if cli.determinism_check {
                1
            } else {
                cli.threads
            },
        })
    }

    fn parse<T: serde::de::DeserializeOwned>(&self) -> Result<T, CliError> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| CliError::Runtime(Error::Config(format!("invalid config: {e}"))))
    }

    /// Resolves a possibly relative path against the config file location.
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }

    fn manifest(&self, t0: Instant) -> Manifest {
        Manifest::new(
            self.command,
            &self.config_path,
            &self.config_sha256,
            self.seed,
            self.threads,
            self.determinism_check,
            t0,
        )
    }

    fn writer(&self) -> OutputWriter {
        OutputWriter::new(&self.out_dir, self.force)
    }
}

/// Applies one `KEY=VALUE` override onto the config JSON.
fn apply_override(config: &mut serde_json::Value, pair: &str) -> Result<(), Error> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {pair:?} is not KEY=VALUE")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path {key:?} hits a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-family
// ---------------------------------------------------------------------------

fn gen_family(ctx: Context, t0: Instant) -> Result<(), CliError> {
    let spec: FamilySpec = ctx.parse()?;
    // Generating validates the spec end to end.
    let family = LossFamily::generate(&spec)?;
    let mut writer = ctx.writer();
    let body = serde_json::to_string_pretty(&spec).map_err(Error::from)?;
    writer.write("family.json", body.as_bytes())?;

    let mut m = ctx.manifest(t0);
    m.note("family_hash", serde_json::json!(family_hash(&spec)));
    m.note("dimension", serde_json::json!(family.dimension()));
    m.note("max_samples", serde_json::json!(family.max_samples()));
    m.finish(writer)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// subspace
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct SubspaceConfig {
    #[serde(default)]
    family: Option<FamilySpec>,
    #[serde(default)]
    family_path: Option<PathBuf>,
    k: usize,
    d: usize,
    #[serde(default = "default_eig_tol")]
    tol: f64,
    #[serde(default = "default_eig_max_iters")]
    max_iters: usize,
    #[serde(default = "default_shift_probes")]
    shift_probes: usize,
    seed: u64,
    #[serde(default = "default_minimizer_tol")]
    minimizer_tol: f64,
    #[serde(default = "default_minimizer_max_iters")]
    minimizer_max_iters: usize,
    /// Where keyed subspace files live; defaults to the output directory.
    #[serde(default)]
    cache_dir: Option<PathBuf>,
}

fn default_eig_tol() -> f64 {
    1e-6
}
fn default_eig_max_iters() -> usize {
    1000
}
fn default_shift_probes() -> usize {
    10
}
fn default_minimizer_tol() -> f64 {
    1e-6
}
fn default_minimizer_max_iters() -> usize {
    200_000
}

fn load_family(
    ctx: &Context,
    inline: &Option<FamilySpec>,
    path: &Option<PathBuf>,
) -> Result<(LossFamily, FamilySpec), CliError> {
    let spec = match (inline, path) {
        (Some(spec), None) => spec.clone(),
        (None, Some(p)) => {
            let full = ctx.resolve(p);
            let text = std::fs::read_to_string(&full).map_err(Error::from)?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        _ => {
            return Err(CliError::Runtime(Error::Config(
                "exactly one of `family` or `family_path` must be given".into(),
            )))
        }
    };
    Ok((LossFamily::generate(&spec)?, spec))
}

/// Keyed stem for a cached subspace: family content hash, sample count,
/// dimension, and eigensolver tolerance.
fn basis_stem(dir: &Path, spec: &FamilySpec, k: usize, d: usize, tol: f64) -> PathBuf {
    dir.join(format!("basis_{}_k{k}_d{d}_tol{tol:e}", family_hash(spec)))
}

struct BasisOutcome {
    basis: SubspaceBasis,
    stem: PathBuf,
    cache_hit: bool,
    seconds: f64,
    warning: Option<String>,
}

fn obtain_basis(
    family: &LossFamily,
    spec: &FamilySpec,
    w: &Weights,
    cfg: &EigSolverConfig,
    k: usize,
    cache_dir: &Path,
) -> Result<BasisOutcome, Error> {
    std::fs::create_dir_all(cache_dir)?;
    let stem = basis_stem(cache_dir, spec, k, cfg.d, cfg.tol);
    let mut warning = None;
    if stem.with_extension("json").exists() {
        let t0 = Instant::now();
        match SubspaceBasis::load(&stem) {
            Ok(basis) if basis.n() == family.dimension() && basis.d() == cfg.d => {
                return Ok(BasisOutcome {
                    basis,
                    stem,
                    cache_hit: true,
                    seconds: t0.elapsed().as_secs_f64(),
                    warning: None,
                });
            }
            Ok(_) => {
                warning = Some(format!(
                    "warning: cache entry {} has wrong shape; recomputing",
                    stem.display()
                ));
            }
            Err(e) => {
                warning = Some(format!(
                    "warning: cache entry {} unreadable ({e}); recomputing",
                    stem.display()
                ));
            }
        }
        if let Some(w) = &warning {
            eprintln!("{w}");
        }
    }
    let t0 = Instant::now();
    let basis = top_d_eigenpairs(
        |v| family.hvp(k, &w.w, v).expect("validated hvp"),
        family.dimension(),
        cfg,
    )?;
    let seconds = t0.elapsed().as_secs_f64();
    basis.save(&stem)?;
    Ok(BasisOutcome {
        basis,
        stem,
        cache_hit: false,
        seconds,
        warning,
    })
}

fn subspace_cmd(ctx: Context, t0: Instant) -> Result<(), CliError> {
    let cfg: SubspaceConfig = ctx.parse()?;
    let (family, spec) = load_family(&ctx, &cfg.family, &cfg.family_path)?;
    let w = family.minimize(
        cfg.k,
        &family.initial_weights(cfg.seed),
        cfg.minimizer_tol,
        cfg.minimizer_max_iters,
    )?;
    let eig = EigSolverConfig {
        d: cfg.d,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        shift_probes: cfg.shift_probes,
        seed: cfg.seed,
    };
    let cache_dir = cfg
        .cache_dir
        .as_ref()
        .map(|p| ctx.resolve(p))
        .unwrap_or_else(|| ctx.out_dir.clone());
    let outcome = obtain_basis(&family, &spec, &w, &eig, cfg.k, &cache_dir)?;

    let mut writer = ctx.writer();
    writer.record_external(&outcome.stem.with_extension("json"))?;
    writer.record_external(&outcome.stem.with_extension("f64le"))?;

    let mut m = ctx.manifest(t0);
    m.note("family_hash", serde_json::json!(family_hash(&spec)));
    m.note("k", serde_json::json!(cfg.k));
    m.note("d", serde_json::json!(cfg.d));
    m.note("cache_hit", serde_json::json!(outcome.cache_hit));
    m.note("stage1_s", serde_json::json!(outcome.seconds));
    m.note(
        "hvp_calls",
        serde_json::json!(if outcome.cache_hit {
            0
        } else {
            outcome.basis.hvp_calls()
        }),
    );
    m.note(
        "eigenvalues",
        serde_json::json!(outcome.basis.eigenvalues().as_slice()),
    );
    m.note(
        "minimizer_grad_norm",
        serde_json::json!(w.achieved_grad_norm()),
    );
    if let Some(warning) = outcome.warning {
        m.note("warnings", serde_json::json!([warning]));
    }
    m.finish(writer)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CriterionConfig {
    #[serde(default)]
    family: Option<FamilySpec>,
    #[serde(default)]
    family_path: Option<PathBuf>,
    k: usize,
    /// One of `delta1`, `delta_p_mc`, `direct_mc`, `quad_mc`,
    /// `gm_closed_form`.
    estimator: String,
    #[serde(default)]
    d: Option<usize>,
    #[serde(default)]
    sigma: Option<f64>,
    #[serde(default)]
    samples: Option<usize>,
    /// Aggregation order for `delta_p_mc`.
    #[serde(default)]
    p: Option<f64>,
    /// Probe for `delta_p_mc`: `full_gaussian` or `subspace_gaussian`.
    #[serde(default)]
    probe: Option<String>,
    seed: u64,
    #[serde(default = "default_eig_tol")]
    eig_tol: f64,
    #[serde(default = "default_eig_max_iters")]
    eig_max_iters: usize,
    #[serde(default = "default_shift_probes")]
    eig_shift_probes: usize,
    #[serde(default = "default_minimizer_tol")]
    minimizer_tol: f64,
    #[serde(default = "default_minimizer_max_iters")]
    minimizer_max_iters: usize,
    #[serde(default)]
    cache_dir: Option<PathBuf>,
}

fn criterion_cmd(ctx: Context, t0: Instant) -> Result<(), CliError> {
    let cfg: CriterionConfig = ctx.parse()?;
    let (family, spec) = load_family(&ctx, &cfg.family, &cfg.family_path)?;
    let missing = |what: &str| {
        CliError::Runtime(Error::Config(format!(
            "estimator {:?} requires {what}",
            cfg.estimator
        )))
    };
    let w = family.minimize(
        cfg.k,
        &family.initial_weights(cfg.seed),
        cfg.minimizer_tol,
        cfg.minimizer_max_iters,
    )?;

    let mut cache_note = serde_json::Value::Null;
    let mut basis_for = |d: usize| -> Result<SubspaceBasis, CliError> {
        let eig = EigSolverConfig {
            d,
            max_iters: cfg.eig_max_iters,
            tol: cfg.eig_tol,
            shift_probes: cfg.eig_shift_probes,
            seed: cfg.seed,
        };
        match cfg.cache_dir.as_ref() {
            Some(dir) => {
                let outcome = obtain_basis(&family, &spec, &w, &eig, cfg.k, &ctx.resolve(dir))?;
                cache_note = serde_json::json!({
                    "cache_hit": outcome.cache_hit,
                    "stem": outcome.stem.display().to_string(),
                });
                Ok(outcome.basis)
            }
            None => Ok(top_d_eigenpairs(
                |v| family.hvp(cfg.k, &w.w, v).expect("validated hvp"),
                family.dimension(),
                &eig,
            )?),
        }
    };

    let estimate: CriterionEstimate = match cfg.estimator.as_str() {
        "delta1" => delta1(&family, cfg.k, &w)?,
        "delta_p_mc" => {
            let sigma = cfg.sigma.ok_or_else(|| missing("sigma"))?;
            let samples = cfg.samples.ok_or_else(|| missing("samples"))?;
            let p = cfg.p.unwrap_or(2.0);
            match cfg.probe.as_deref().unwrap_or("full_gaussian") {
                "full_gaussian" => {
                    let probe = Probe::FullGaussian { sigma };
                    delta_p_mc(&family, cfg.k, &w, &probe, p, samples, cfg.seed)?
                }
                "subspace_gaussian" => {
                    let d = cfg.d.ok_or_else(|| missing("d"))?;
                    let basis = basis_for(d)?;
                    let probe = Probe::SubspaceGaussian {
                        sigma,
                        basis: &basis,
                    };
                    delta_p_mc(&family, cfg.k, &w, &probe, p, samples, cfg.seed)?
                }
                other => {
                    return Err(CliError::Runtime(Error::Config(format!(
                        "unknown probe {other:?}"
                    ))))
                }
            }
        }
        "direct_mc" => {
            let d = cfg.d.ok_or_else(|| missing("d"))?;
            let sigma = cfg.sigma.ok_or_else(|| missing("sigma"))?;
            let samples = cfg.samples.ok_or_else(|| missing("samples"))?;
            let basis = basis_for(d)?;
            direct_mc(&family, cfg.k, &basis, &w, sigma, samples, cfg.seed)?
        }
        "quad_mc" | "gm_closed_form" => {
            let d = cfg.d.ok_or_else(|| missing("d"))?;
            let sigma = cfg.sigma.ok_or_else(|| missing("sigma"))?;
            let basis = basis_for(d)?;
            let coeffs = surrogate_coeffs(&family, cfg.k, &w, &basis, sigma)?;
            if cfg.estimator == "quad_mc" {
                let samples = cfg.samples.ok_or_else(|| missing("samples"))?;
                quad_mc(&coeffs, samples, cfg.seed)?
            } else {
                gm_closed_form(&coeffs)
            }
        }
        other => {
            return Err(CliError::Runtime(Error::Config(format!(
                "unknown estimator {other:?}"
            ))))
        }
    };

    let mut writer = ctx.writer();
    let body = serde_json::to_string_pretty(&estimate).map_err(Error::from)?;
    writer.write("criterion.json", body.as_bytes())?;

    let mut m = ctx.manifest(t0);
    m.note("family_hash", serde_json::json!(family_hash(&spec)));
    m.note("estimator", serde_json::json!(cfg.estimator));
    m.note("k", serde_json::json!(cfg.k));
    m.note("value", serde_json::json!(estimate.value));
    m.note("cache", cache_note);
    m.finish(writer)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ExperimentConfig {
    /// One of `decay`, `ratio`, `proxy`, `estimators`.
    experiment: String,
    #[serde(flatten)]
    sweep: SweepConfig,
}

fn experiment_cmd(ctx: Context, t0: Instant) -> Result<(), CliError> {
    let cfg: ExperimentConfig = ctx.parse()?;
    let mut sweep = cfg.sweep;
    let (family, spec) = load_family(&ctx, &sweep.family, &sweep.family_path)?;
    sweep.family = Some(spec.clone());
    sweep.family_path = None;
    sweep.cache_dir = if ctx.determinism_check {
        // A cache hit changes the hvp_calls column, breaking byte equality
        // between cold and warm runs.
        None
    } else {
        sweep.cache_dir.as_ref().map(|p| ctx.resolve(p))
    };

    let runner: fn(&LossFamily, &SweepConfig) -> stabkit::error::Result<RunOutput> =
        match cfg.experiment.as_str() {
            "decay" => run_decay,
            "ratio" => run_ratio,
            "proxy" => run_proxy_validity,
            "estimators" => run_estimators,
            other => {
                return Err(CliError::Runtime(Error::Config(format!(
                    "unknown experiment {other:?}"
                ))))
            }
        };
    let mut output = runner(&family, &sweep)?;
    if ctx.determinism_check {
        zero_timings(&mut output.records);
    }

    let mut writer = ctx.writer();
    let csv_name = format!("{}.csv", cfg.experiment);
    writer.write(&csv_name, emit_csv(&output.records).as_bytes())?;
    let summary = serde_json::to_string_pretty(&output.summary).map_err(Error::from)?;
    writer.write("summary.json", summary.as_bytes())?;

    let mut m = ctx.manifest(t0);
    m.note("experiment", serde_json::json!(cfg.experiment));
    m.note("family_hash", serde_json::json!(family_hash(&spec)));
    m.note("records", serde_json::json!(output.records.len()));
    m.finish(writer)?;
    Ok(())
}
