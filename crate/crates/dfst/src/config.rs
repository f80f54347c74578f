//! Run configuration: a TOML file describing one training run.
//!
//! Example:
//!
//! ```toml
//! problem = "euler_vortex"
//! output_dir = "runs/euler_smoke"
//! identity_offset = true
//!
//! [network]
//! hidden = [32, 32, 32, 32]
//! seed = 0
//!
//! [collocation]
//! interior = 500
//! boundary = 130
//! initial = 70
//! seed = 1
//!
//! [optimizer]
//! max_iters = 2000
//!
//! [validation]
//! points = 2000
//! seed = 2
//! ```
//!
//! Physical parameters default to the standard benchmark values and can be
//! overridden in `[euler]`, `[beltrami]` or `[mhd]` sections. A validation
//! set is either generated (`points` + `seed`) or read from a CSV file
//! (`file = "..."`); referenced files must exist when the config loads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lbfgs::LbfgsOptions;
use crate::physics::{
    BeltramiConfig, CollocationCounts, EulerVortexConfig, MhdConfig, PhysicsError, ProblemKind,
    ProblemSpec,
};
use crate::train::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Problem(#[from] PhysicsError),
    #[error("referenced file does not exist: {0}")]
    MissingFile(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { hidden: vec![32, 32, 32, 32], seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CollocationSection {
    pub interior: usize,
    #[serde(default)]
    pub boundary: usize,
    #[serde(default)]
    pub initial: usize,
    #[serde(default = "default_colloc_seed")]
    pub seed: u64,
}

fn default_colloc_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerSection {
    pub max_iters: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub ftol: f64,
    pub gtol: f64,
    pub max_line_search: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = LbfgsOptions::default();
        OptimizerSection {
            max_iters: 1000,
            memory: o.memory,
            c1: o.c1,
            c2: o.c2,
            ftol: o.ftol,
            gtol: o.gtol,
            max_line_search: o.max_line_search,
        }
    }
}

impl OptimizerSection {
    pub fn to_options(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iters: self.max_iters,
            memory: self.memory,
            c1: self.c1,
            c2: self.c2,
            ftol: self.ftol,
            gtol: self.gtol,
            max_line_search: self.max_line_search,
        }
    }
}

/// Validation data: generated from the exact solution, or read from CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationSection {
    #[serde(default)]
    pub points: Option<usize>,
    #[serde(default = "default_validation_seed")]
    pub seed: u64,
    #[serde(default)]
    pub file: Option<PathBuf>,
}

fn default_validation_seed() -> u64 {
    2
}

impl Default for ValidationSection {
    fn default() -> Self {
        ValidationSection { points: Some(2000), seed: 2, file: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub problem: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub identity_offset: bool,
    #[serde(default)]
    pub network: NetworkSection,
    pub collocation: CollocationSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub validation: ValidationSection,
    #[serde(default)]
    pub euler: Option<EulerVortexConfig>,
    #[serde(default)]
    pub beltrami: Option<BeltramiConfig>,
    #[serde(default)]
    pub mhd: Option<MhdConfig>,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_str_validated(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate(base_dir)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), source: e })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_str_validated(&text, base)
    }

    fn validate(&self, base_dir: &Path) -> Result<(), ConfigError> {
        ProblemKind::parse(&self.problem)?;
        if self.collocation.interior == 0 {
            return Err(ConfigError::Invalid("collocation.interior must be positive".into()));
        }
        if self.network.hidden.is_empty() {
            return Err(ConfigError::Invalid("network.hidden must not be empty".into()));
        }
        if self.validation.file.is_none() && self.validation.points.is_none() {
            return Err(ConfigError::Invalid(
                "validation needs either `points` or `file`".into(),
            ));
        }
        if let Some(file) = &self.validation.file {
            let resolved = self.resolve(base_dir, file);
            if !resolved.exists() {
                return Err(ConfigError::MissingFile(resolved.display().to_string()));
            }
        }
        Ok(())
    }

    fn resolve(&self, base_dir: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }

    pub fn kind(&self) -> ProblemKind {
        ProblemKind::parse(&self.problem).expect("validated")
    }

    /// The problem spec with config overrides applied over defaults.
    pub fn problem_spec(&self) -> ProblemSpec {
        match self.kind() {
            ProblemKind::EulerVortex => {
                ProblemSpec::EulerVortex(self.euler.clone().unwrap_or_default())
            }
            ProblemKind::Beltrami => {
                ProblemSpec::Beltrami(self.beltrami.clone().unwrap_or_default())
            }
            ProblemKind::Mhd2d => ProblemSpec::Mhd2d(self.mhd.clone().unwrap_or_default()),
        }
    }

    pub fn counts(&self) -> CollocationCounts {
        CollocationCounts {
            interior: self.collocation.interior,
            boundary: self.collocation.boundary,
            initial: self.collocation.initial,
        }
    }

    /// Canonical serialized form (for hashing and the run manifest).
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
