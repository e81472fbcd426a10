//! Experiment configuration: a flat TOML table plus `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::DownlinkMode;
use crate::error::{FedError, Result};

pub const ALGORITHMS: [&str; 3] = ["fedcet", "scaffold", "fedavg"];

/// A real parameter that is either fixed or resolved at run time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawSetting", into = "RawSetting")]
pub enum Setting {
    #[default]
    Auto,
    Fixed(f64),
}

impl Setting {
    pub fn fixed(self) -> Option<f64> {
        match self {
            Setting::Auto => None,
            Setting::Fixed(v) => Some(v),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Auto => f.write_str("auto"),
            Setting::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawSetting {
    Num(f64),
    Int(i64),
    Text(String),
}

impl TryFrom<RawSetting> for Setting {
    type Error = String;

    fn try_from(raw: RawSetting) -> std::result::Result<Self, String> {
        match raw {
            RawSetting::Num(v) => Ok(Setting::Fixed(v)),
            RawSetting::Int(v) => Ok(Setting::Fixed(v as f64)),
            RawSetting::Text(s) if s == "auto" => Ok(Setting::Auto),
            RawSetting::Text(s) => Err(format!("expected a number or \"auto\", got {s:?}")),
        }
    }
}

impl From<Setting> for RawSetting {
    fn from(s: Setting) -> Self {
        match s {
            Setting::Auto => RawSetting::Text("auto".into()),
            Setting::Fixed(v) => RawSetting::Num(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub dim: usize,
    pub tau: u32,
    pub alpha: Setting,
    pub c: Setting,
    pub h_frac: f64,
    pub data_range: [f64; 2],
    pub algorithms: Vec<String>,
    pub seeds: Vec<u64>,
    pub max_rounds: u64,
    pub tol: f64,
    /// Both fixed-point residuals must also fall to this before a run counts
    /// as converged.
    pub residual_tol: f64,
    pub downlink: DownlinkMode,
    pub out_dir: PathBuf,
    /// FedAvg local step; `auto` is `1/(2τL)`.
    pub fedavg_lr: Setting,
    pub scaffold_lr_global: f64,
    /// SCAFFOLD local step; `auto` is `1/(81τL)`.
    pub scaffold_lr_local: Setting,
    /// Every entry of every client's `x_i(−2)`.
    pub x_init: f64,
    pub divergence_cap: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_clients: 10,
            samples_per_client: 10,
            dim: 60,
            tau: 2,
            alpha: Setting::Auto,
            c: Setting::Auto,
            h_frac: 0.001,
            data_range: [-10.0, 10.0],
            algorithms: ALGORITHMS.iter().map(|s| s.to_string()).collect(),
            seeds: vec![1, 2, 3],
            max_rounds: 200_000,
            tol: 1e-10,
            residual_tol: 1e-6,
            downlink: DownlinkMode::Broadcast,
            out_dir: PathBuf::from("results"),
            fedavg_lr: Setting::Auto,
            scaffold_lr_global: 1.0,
            scaffold_lr_local: Setting::Auto,
            x_init: 0.0,
            divergence_cap: 1e12,
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document, applies `key=value` overrides and validates.
    /// Override values are read as TOML values, falling back to a bare string.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            FedError::config(format!("config parse error: {}", e.message()))
        })?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| FedError::config(format!("override {item:?} is not KEY=VALUE")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| FedError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| FedError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FedError::Config(msg));
        if self.num_clients == 0 || self.samples_per_client == 0 || self.dim == 0 {
            return bad("num_clients, samples_per_client and dim must be >= 1".into());
        }
        if self.tau == 0 {
            return bad("tau must be >= 1".into());
        }
        if !(self.h_frac.is_finite() && self.h_frac > 0.0) {
            return bad(format!("h_frac must be > 0, got {}", self.h_frac));
        }
        let [lo, hi] = self.data_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return bad(format!(
                "data_range must satisfy lo <= hi, got ({lo}, {hi})"
            ));
        }
        if self.algorithms.is_empty() {
            return bad("algorithms must not be empty".into());
        }
        if let Some(a) = self
            .algorithms
            .iter()
            .find(|a| !ALGORITHMS.contains(&a.as_str()))
        {
            return bad(format!(
                "unknown algorithm {a:?}; expected one of {ALGORITHMS:?}"
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be >= 1".into());
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return bad(format!("tol must be >= 0, got {}", self.tol));
        }
        if self.residual_tol.is_nan() || self.residual_tol < 0.0 {
            return bad(format!(
                "residual_tol must be >= 0, got {}",
                self.residual_tol
            ));
        }
        if self.divergence_cap.is_nan() || self.divergence_cap <= 0.0 {
            return bad(format!(
                "divergence_cap must be > 0, got {}",
                self.divergence_cap
            ));
        }
        if !self.x_init.is_finite() {
            return bad("x_init must be finite".into());
        }
        for (name, s) in [
            ("alpha", self.alpha),
            ("c", self.c),
            ("fedavg_lr", self.fedavg_lr),
            ("scaffold_lr_local", self.scaffold_lr_local),
        ] {
            if let Some(v) = s.fixed() {
                if !(v.is_finite() && v > 0.0) {
                    return bad(format!("{name} must be > 0 or \"auto\", got {v}"));
                }
            }
        }
        if !(self.scaffold_lr_global.is_finite() && self.scaffold_lr_global > 0.0) {
            return bad(format!(
                "scaffold_lr_global must be > 0, got {}",
                self.scaffold_lr_global
            ));
        }
        Ok(())
    }
}
