//! CSV telemetry and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::experiment::config::ExperimentConfig;
use crate::harness::{Comparison, RoundRecord};

pub const CSV_HEADER: &str =
    "algorithm,seed,round,iteration,error,lyapunov,r_consensus,r_gradient,scalars_up_cum,scalars_down_cum";

/// 17 significant digits, so every value parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn records_csv(records: &[RoundRecord], seed: u64) -> String {
    let mut out = String::with_capacity(160 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let lyap = r.lyapunov.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.algorithm,
            seed,
            r.k,
            r.iteration,
            fmt_f64(r.error),
            lyap,
            fmt_f64(r.r_consensus),
            fmt_f64(r.r_gradient),
            r.scalars_up_cum,
            r.scalars_down_cum
        );
    }
    out
}

/// Wide table: `round`, then `<algo>_error` and `<algo>_scalars_cum` per run.
/// Cells past the end of a shorter run are empty.
pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from("round");
    for run in &cmp.runs {
        let _ = write!(out, ",{0}_error,{0}_scalars_cum", run.algorithm);
    }
    out.push('\n');
    let longest = cmp.runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    for k in 0..longest {
        out.push_str(&k.to_string());
        for run in &cmp.runs {
            match run.records.get(k) {
                Some(r) => {
                    let _ = write!(
                        out,
                        ",{},{}",
                        fmt_f64(r.error),
                        r.scalars_up_cum + r.scalars_down_cum
                    );
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn run_csv_name(algorithm: &str, seed: u64) -> String {
    format!("{algorithm}_seed{seed}.csv")
}

pub fn manifest_name(seed: u64) -> String {
    format!("manifest_seed{seed}.toml")
}

pub fn compare_csv_name(seed: u64) -> String {
    format!("compare_seed{seed}.csv")
}

/// Everything needed to regenerate one seed's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub alpha: f64,
    pub c: f64,
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub rho_pred: f64,
    pub data_sha256: String,
    pub x_star_sha256: String,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    /// Algorithm to final status.
    pub status: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedError::config(format!("manifest serialization: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(text)
            .map_err(|e| FedError::config(format!("manifest parse error: {}", e.message())))?;
        m.config.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| FedError::io(path, e))
}
