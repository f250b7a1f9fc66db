//! Experiment configuration files.

use std::fmt;
use std::path::{Path, PathBuf};

use mjs_core::adaptive::EpochSchedule;
use mjs_core::sysid::SysidConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SysidSweep,
    RegretSweep,
    SingleRun,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SysidSweep => "sysid-sweep",
            Self::RegretSweep => "regret-sweep",
            Self::SingleRun => "single-run",
        })
    }
}

/// A scalar or a list; scalars become one-element grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> Grid<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            Grid::One(v) => vec![v.clone()],
            Grid::Many(v) => v.clone(),
        }
    }
}

fn one<T>(v: T) -> Grid<T> {
    Grid::One(v)
}

/// One experiment. Every grid field may be a scalar or a list; the sweep
/// runs the Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    #[serde(default = "default_n")]
    pub n: Grid<usize>,
    #[serde(default = "default_p")]
    pub p: Grid<usize>,
    #[serde(default = "default_s")]
    pub s: Grid<usize>,
    /// Model JSON file (`{n, p, s, A, B, T}` plus optional `{Q, R}`) used
    /// instead of the random generator.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default = "default_sigma")]
    pub sigma_w: Grid<f64>,
    #[serde(default = "default_sigma")]
    pub sigma_z: Grid<f64>,
    #[serde(rename = "T", default = "default_horizons")]
    pub horizons: Grid<usize>,
    #[serde(rename = "T0", default = "default_t0")]
    pub t0: Grid<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: Grid<f64>,
    #[serde(default = "default_epochs")]
    pub num_epochs: usize,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub sysid: SysidConfig,
    #[serde(default)]
    pub known_b: bool,
    /// Reuse one model per replication across the noise and horizon grids.
    #[serde(default)]
    pub shared_model: bool,
    #[serde(default = "default_cap")]
    pub spectral_cap: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_n() -> Grid<usize> {
    one(5)
}
fn default_p() -> Grid<usize> {
    one(3)
}
fn default_s() -> Grid<usize> {
    one(5)
}
fn default_sigma() -> Grid<f64> {
    one(0.01)
}
fn default_horizons() -> Grid<usize> {
    Grid::Many(vec![4000, 16000, 64000])
}
fn default_t0() -> Grid<usize> {
    one(2000)
}
fn default_gamma() -> Grid<f64> {
    one(2.0)
}
fn default_epochs() -> usize {
    5
}
fn default_reps() -> usize {
    10
}
fn default_cap() -> f64 {
    0.5
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

/// A configuration problem, naming the offending field or JSON position.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Parse {
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    Field {
        field: String,
        message: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse {
                line,
                column,
                offset,
                message,
            } => write!(
                f,
                "invalid JSON at line {line}, column {column} (byte offset {offset}): {message}"
            ),
            ConfigError::Field { field, message } => write!(f, "invalid config field `{field}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn field(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: name.to_string(),
        message: message.into(),
    }
}

/// Byte offset of a 1-based (line, column) position; serde_json counts
/// columns in bytes.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses JSON text, reporting syntax and type errors with their position.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        let mut cfg = Self::from_json(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        if let Some(model) = &cfg.model_file {
            if model.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.model_file = Some(dir.join(model));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn nonempty<T: Clone>(name: &str, g: &Grid<T>) -> Result<Vec<T>, ConfigError> {
            let v = g.values();
            if v.is_empty() {
                return Err(field(name, "grid must not be empty"));
            }
            Ok(v)
        }
        for (name, g) in [("n", &self.n), ("p", &self.p), ("s", &self.s)] {
            if nonempty(name, g)?.contains(&0) {
                return Err(field(name, "dimensions must be at least 1"));
            }
        }
        for (name, g) in [("sigma_w", &self.sigma_w), ("sigma_z", &self.sigma_z)] {
            if nonempty(name, g)?.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(field(name, "noise levels must be positive and finite"));
            }
        }
        if nonempty("T", &self.horizons)?.iter().any(|&t| t < 2) {
            return Err(field("T", "horizons must be at least 2"));
        }
        let t0 = nonempty("T0", &self.t0)?;
        let gamma = nonempty("gamma", &self.gamma)?;
        for &t in &t0 {
            for &g in &gamma {
                EpochSchedule::new(t, g, self.num_epochs.max(1)).map_err(|e| field("T0/gamma", e.to_string()))?;
            }
        }
        if self.num_epochs == 0 {
            return Err(field("num_epochs", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(field("replications", "must be at least 1"));
        }
        if !(self.spectral_cap > 0.0 && self.spectral_cap < 1.0) {
            return Err(field("spectral_cap", "must lie in (0, 1)"));
        }
        if let Some(c) = self.sysid.c_x {
            if !(c > 0.0) {
                return Err(field("sysid.c_x", "must be positive"));
            }
        }
        if let Some(c) = self.sysid.c_z {
            if !(c > 0.0) {
                return Err(field("sysid.c_z", "must be positive"));
            }
        }
        Ok(())
    }

    /// Applies `--seed` and `--reps` overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, reps: Option<usize>) -> Result<Self, ConfigError> {
        if let Some(seed) = seed {
            self.base_seed = seed;
        }
        if let Some(reps) = reps {
            self.replications = reps;
        }
        self.validate()?;
        Ok(self)
    }
}
