//! Run manifest: every invocation writes `run.json` recording the config
//! hash, seed, version, wall time, and each output file with its content
//! hash.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use stabkit::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

/// Writes result files under the output directory, refusing to overwrite
/// existing files unless forced, and records a content hash for each.
pub struct OutputWriter {
    out_dir: PathBuf,
    force: bool,
    outputs: Vec<OutputEntry>,
}

impl OutputWriter {
    pub fn new(out_dir: &Path, force: bool) -> Self {
        OutputWriter {
            out_dir: out_dir.to_path_buf(),
            force,
            outputs: Vec::new(),
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if path.exists() && !self.force {
            return Err(Error::Config(format!(
                "output file {} exists; pass --force to overwrite",
                path.display()
            )));
        }
        std::fs::write(&path, bytes)?;
        self.outputs.push(OutputEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Records a file produced elsewhere (for example a cache entry) in the
    /// manifest without rewriting it.
    pub fn record_external(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.outputs.push(OutputEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    command: &'static str,
    config_path: String,
    config_sha256: String,
    seed: Option<u64>,
    version: &'static str,
    threads: usize,
    determinism_check: bool,
    wall_time_s: f64,
    outputs: Vec<OutputEntry>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    notes: serde_json::Map<String, serde_json::Value>,
    #[serde(skip)]
    started: Instant,
}

impl Manifest {
    pub fn new(
        command: &'static str,
        config_path: &Path,
        config_sha256: &str,
        seed: Option<u64>,
        threads: usize,
        determinism_check: bool,
        started: Instant,
    ) -> Self {
        Manifest {
            command,
            config_path: config_path.display().to_string(),
            config_sha256: config_sha256.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            threads,
            determinism_check,
            wall_time_s: 0.0,
            outputs: Vec::new(),
            notes: serde_json::Map::new(),
            started,
        }
    }

    pub fn note(&mut self, key: &str, value: serde_json::Value) {
        self.notes.insert(key.to_string(), value);
    }

    /// Writes `run.json` last, so the manifest covers every output.
    pub fn finish(mut self, writer: OutputWriter) -> Result<()> {
        let out_dir = writer.out_dir.clone();
        self.outputs = writer.outputs;
        self.wall_time_s = self.started.elapsed().as_secs_f64();
        let body = serde_json::to_string_pretty(&self)?;
        let path = out_dir.join("run.json");
        std::fs::write(&path, body)?;
        Ok(())
    }
}
