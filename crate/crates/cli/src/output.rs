//! Report rendering and the on-disk layout `<out>/<config-hash>/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::CliError;

/// Plot-ready table with a fixed header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn nums(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| num(*x)).collect()
}

pub fn coord_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

pub struct RunOutput {
    pub command: ExperimentKind,
    pub results: Value,
    pub csv: Csv,
    /// Set when an acceptance run has failing criteria.
    pub failure: Option<String>,
    /// Run-dependent values (timings) kept out of the report.
    pub metadata: Value,
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// First 16 hex digits of the SHA-256 of the canonical config JSON.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Deterministic `report.json` and `series.csv` contents.
pub fn render(config: &ExperimentConfig, run: &RunOutput) -> (String, String) {
    let report = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": run.command,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "config": config,
        "passed": run.failure.is_none(),
        "results": run.results,
    });
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    (text, run.csv.render())
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct Timing {
    pub started: f64,
}

impl Timing {
    pub fn start() -> Self {
        Self { started: unix_now() }
    }
}

/// Writes the report, series and a separate timestamp block.
pub fn write_outputs(
    out: &Path,
    config: &ExperimentConfig,
    run: &RunOutput,
    timing: &Timing,
    threads: usize,
) -> Result<PathBuf, CliError> {
    let dir = out.join(config_hash(config));
    std::fs::create_dir_all(&dir)?;
    let (report, csv) = render(config, run);
    std::fs::write(dir.join("report.json"), report)?;
    std::fs::write(dir.join("series.csv"), csv)?;
    let finished = unix_now();
    let mut meta = String::new();
    let _ = writeln!(
        meta,
        "{}",
        serde_json::to_string_pretty(&json!({
            "started_unix": timing.started,
            "finished_unix": finished,
            "elapsed_secs": finished - timing.started,
            "threads": threads,
            "run": run.metadata,
        }))
        .expect("metadata serializes")
    );
    std::fs::write(dir.join("metadata.json"), meta)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_render() {
        let mut c = Csv::new(["a", "b"]);
        c.push(vec![num(0.1), num(2.0)]);
        assert_eq!(c.render(), "a,b\n0.1,2\n");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..Default::default()
        };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }
}
