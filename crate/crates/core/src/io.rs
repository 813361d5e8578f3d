//! Configuration files, canonical form and result files.
//!
//! Configs are TOML with top-level `cycles_per_point`, `seed`, `noise` and
//! the sections `[nv]`, `[rates]`, `[environment]`, `[ipcd]`, `[protocol]`
//! and `[sweep]`. Every key is optional; unknown keys are errors.
//!
//! A run writes three files next to each other:
//! `<out>` (CSV table), `<out stem>.json` (fit, series, summary and the
//! deterministic part of the manifest) and `<out stem>.manifest.json`
//! (wall-clock timestamps). The first two are byte-identical across reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::experiments::{ExperimentConfig, ExperimentError, ExperimentResult, Series, SweepKind};
use crate::fit::FitReport;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CSV_HEADER: &str = "sweep_value,mean_diff_current_A,std_A,n_cycles";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write `{path}`: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Validation(#[from] ExperimentError),
    #[error("invalid result: {0}")]
    InvalidResult(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parse and validate config text; `origin` labels error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, IoError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        IoError::Parse {
            path: origin.to_string(),
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, &path.display().to_string())
}

/// Canonical TOML: every field explicit, keys sorted, shortest round-trip floats.
pub fn canonical_config(cfg: &ExperimentConfig) -> String {
    let value = toml::Value::try_from(cfg).expect("config serializes to TOML");
    toml::to_string(&value).expect("TOML value prints")
}

/// SHA-256 of the canonical form, hex encoded.
pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let hash = Sha256::digest(canonical_config(cfg).as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
    /// Unix time in seconds.
    pub started: f64,
    pub finished: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(cfg: &ExperimentConfig) -> Self {
        Self {
            config_digest: config_digest(cfg),
            seed: cfg.seed,
            tool_version: TOOL_VERSION.to_string(),
            started: unix_now(),
            finished: f64::NAN,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished = unix_now();
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Paths of the three output files for table path `out`.
pub fn output_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out.to_path_buf(),
        out.with_extension("json"),
        out.with_extension("manifest.json"),
    )
}

/// CSV table, one row per sweep point, 17 significant digits.
pub fn results_table(result: &ExperimentResult) -> Result<String, IoError> {
    let n = result.sweep_values.len();
    if n == 0 {
        return Err(IoError::InvalidResult("no sweep points".into()));
    }
    if result.mean_differential.len() != n || result.std.len() != n || result.n_cycles.len() != n {
        return Err(IoError::InvalidResult("column lengths differ".into()));
    }
    let mut out = String::with_capacity(80 * (n + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{}\n",
            result.sweep_values[i], result.mean_differential[i], result.std[i], result.n_cycles[i]
        ));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    kind: SweepKind,
    config_digest: &'a str,
    seed: u64,
    tool_version: &'a str,
    outputs: &'a [String],
    fit: &'a Option<FitReport>,
    fit_error: &'a Option<String>,
    summary: &'a std::collections::BTreeMap<String, f64>,
    series: &'a [Series],
}

/// Write table, sidecar and manifest. The sidecar carries everything but the
/// timestamps so reruns with the same config reproduce it byte for byte.
pub fn write_results(
    result: &ExperimentResult,
    manifest: &mut RunManifest,
    out: &Path,
) -> Result<(), IoError> {
    let (table_path, sidecar_path, manifest_path) = output_paths(out);
    if table_path == sidecar_path || table_path == manifest_path {
        return Err(IoError::InvalidResult(format!(
            "output path `{}` collides with its sidecar; use a .csv extension",
            out.display()
        )));
    }
    let table = results_table(result)?;
    manifest.outputs = [&table_path, &sidecar_path, &manifest_path]
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    let sidecar = Sidecar {
        kind: result.kind,
        config_digest: &manifest.config_digest,
        seed: manifest.seed,
        tool_version: &manifest.tool_version,
        outputs: &manifest.outputs,
        fit: &result.fit,
        fit_error: &result.fit_error,
        summary: &result.summary,
        series: &result.series,
    };
    let sidecar_text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| IoError::Serialize(e.to_string()))?
        + "\n";
    let write = |p: &Path, text: &str| {
        fs::write(p, text).map_err(|source| IoError::Write {
            path: p.to_path_buf(),
            source,
        })
    };
    write(&table_path, &table)?;
    write(&sidecar_path, &sidecar_text)?;
    manifest.finish();
    let manifest_text = serde_json::to_string_pretty(manifest)
        .map_err(|e| IoError::Serialize(e.to_string()))?
        + "\n";
    write(&manifest_path, &manifest_text)
}
