//! Run configuration: one TOML file merged over the defaults, then
//! environment and command-line overrides.
//!
//! ```toml
//! experiment_id = "m-sweep"
//! n_train = 500
//!
//! [generator]
//! n_d2d = 10
//!
//! [train]
//! iters = 300
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{AoConfig, GridConfig};
use crate::experiment::GradcheckConfig;
use crate::gnn::Architecture;
use crate::graph::NODE_FEATURES;
use crate::scenario::GenConfig;
use crate::training::TrainConfig;

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "UAVGNN_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Output width of each message-passing layer.
    pub widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: Architecture::default().widths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment_id: String,
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub generator: GenConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ao: AoConfig,
    pub grid: GridConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment_id: "default".into(),
            out_dir: PathBuf::from("runs"),
            n_train: 500,
            n_test: 200,
            generator: GenConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            ao: AoConfig::default(),
            grid: GridConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Seeds both the generator and the training run.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses TOML text, filling absent keys from the defaults. Unknown
    /// keys are rejected with their dotted path.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialise");
        merge(&mut merged, file);
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let field = e.path().to_string();
            field_err(field, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// File (if any) over defaults, then the environment, then `over`;
    /// validated.
    pub fn resolve(file: Option<&Path>, env_out: Option<PathBuf>, over: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(dir) = env_out {
            cfg.out_dir = dir;
        }
        if let Some(dir) = &over.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(seed) = over.seed {
            cfg.generator.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.experiment_id.trim().is_empty() {
            return Err(field_err("experiment_id", "must not be empty"));
        }
        if self.n_train == 0 {
            return Err(field_err("n_train", "must be at least 1"));
        }
        if self.n_test == 0 {
            return Err(field_err("n_test", "must be at least 1"));
        }
        self.generator.validate().map_err(|e| match e {
            crate::scenario::DatasetError::Config { field, reason } => field_err(format!("generator.{field}"), reason),
            other => field_err("generator", other.to_string()),
        })?;
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return Err(field_err(
                "model.widths",
                "needs at least one layer, all widths positive",
            ));
        }
        self.train.validate().map_err(|e| match e {
            crate::training::TrainError::Config { field, reason } => field_err(format!("train.{field}"), reason),
            other => field_err("train", other.to_string()),
        })?;
        let baseline = |section: &str, e: crate::baselines::BaselineError| match e {
            crate::baselines::BaselineError::Config { field, reason } => {
                field_err(format!("{section}.{field}"), reason)
            }
            other => field_err(section, other.to_string()),
        };
        self.ao.validate().map_err(|e| baseline("ao", e))?;
        self.grid.validate().map_err(|e| baseline("grid", e))?;
        let g = &self.gradcheck;
        if g.scenarios == 0 {
            return Err(field_err("gradcheck.scenarios", "must be at least 1"));
        }
        if g.params_per_scenario == 0 {
            return Err(field_err("gradcheck.params_per_scenario", "must be at least 1"));
        }
        if !(g.eps > 0.0 && g.eps < 1.0) {
            return Err(field_err("gradcheck.eps", "must lie in (0, 1)"));
        }
        if !(g.threshold > 0.0) {
            return Err(field_err("gradcheck.threshold", "must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: NODE_FEATURES,
            widths: self.model.widths.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Header lines identifying the tool version and the full effective
    /// configuration.
    pub fn provenance(&self) -> Vec<String> {
        vec![
            format!("tool uavgnn {}", crate::VERSION),
            format!("experiment_id {}", self.experiment_id),
            format!("config_hash {}", self.hash()),
            format!("config {}", self.to_json()),
        ]
    }
}
