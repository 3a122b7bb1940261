//! Experiment records and their CSV encoding.
//!
//! One record is one measured cell of a sweep. The CSV layout is the
//! machine-readable contract consumed by plotting tools; floats are written
//! in shortest round-trip decimal form, so `parse_csv(emit_csv(r)) == r`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, Result};

/// Exact header line of every experiment CSV.
pub const CSV_HEADER: &str =
    "experiment,k,D,sigma,estimator,S,value,std_error,stage1_s,stage2_s,stage3_s,hvp_calls,seed";

/// One row of an experiment sweep.
///
/// Rows that do not involve a subspace use `d = 0`; rows without a Monte
/// Carlo step use `s = 0`. Stage timings follow the shared decomposition:
/// stage 1 is subspace construction, stage 2 surrogate-coefficient assembly,
/// stage 3 criterion evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub k: usize,
    pub d: usize,
    pub sigma: f64,
    pub estimator: String,
    pub s: usize,
    pub value: f64,
    pub std_error: f64,
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub stage3_s: f64,
    pub hvp_calls: usize,
    pub seed: u64,
}

impl ExperimentRecord {
    pub fn new(experiment: &str, estimator: &str) -> Self {
        ExperimentRecord {
            experiment: experiment.to_string(),
            k: 0,
            d: 0,
            sigma: 0.0,
            estimator: estimator.to_string(),
            s: 0,
            value: 0.0,
            std_error: 0.0,
            stage1_s: 0.0,
            stage2_s: 0.0,
            stage3_s: 0.0,
            hvp_calls: 0,
            seed: 0,
        }
    }
}

/// Serializes records under the exact contractual header.
pub fn emit_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.experiment,
            r.k,
            r.d,
            r.sigma,
            r.estimator,
            r.s,
            r.value,
            r.std_error,
            r.stage1_s,
            r.stage2_s,
            r.stage3_s,
            r.hvp_calls,
            r.seed
        ));
    }
    out
}

/// Parses a CSV produced by [`emit_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ExperimentRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(invalid_argument(format!(
                "unexpected CSV header: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(invalid_argument(format!(
                "line {}: expected 13 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| invalid_argument(format!("line {}: bad {what} field", lineno + 2));
        records.push(ExperimentRecord {
            experiment: fields[0].to_string(),
            k: fields[1].parse().map_err(|_| parse_err("k"))?,
            d: fields[2].parse().map_err(|_| parse_err("D"))?,
            sigma: fields[3].parse().map_err(|_| parse_err("sigma"))?,
            estimator: fields[4].to_string(),
            s: fields[5].parse().map_err(|_| parse_err("S"))?,
            value: fields[6].parse().map_err(|_| parse_err("value"))?,
            std_error: fields[7].parse().map_err(|_| parse_err("std_error"))?,
            stage1_s: fields[8].parse().map_err(|_| parse_err("stage1_s"))?,
            stage2_s: fields[9].parse().map_err(|_| parse_err("stage2_s"))?,
            stage3_s: fields[10].parse().map_err(|_| parse_err("stage3_s"))?,
            hvp_calls: fields[11].parse().map_err(|_| parse_err("hvp_calls"))?,
            seed: fields[12].parse().map_err(|_| parse_err("seed"))?,
        });
    }
    Ok(records)
}

/// Clears the wall-clock columns; used by the determinism-check mode, where
/// reruns must be byte-identical and timings are the only nondeterminism.
pub fn zero_timings(records: &mut [ExperimentRecord]) {
    for r in records {
        r.stage1_s = 0.0;
        r.stage2_s = 0.0;
        r.stage3_s = 0.0;
    }
}

/// Deterministic merge order for records produced by concurrent cells.
pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| {
        (a.experiment.as_str(), a.k, a.d)
            .cmp(&(b.experiment.as_str(), b.k, b.d))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.estimator.cmp(&b.estimator))
            .then(a.s.cmp(&b.s))
    });
}
