//! Run configuration: one TOML file describing tokenization, marker
//! literals, serialization layout, perturbation, backends, metric orders,
//! and output locations. Command-line flags override individual fields;
//! reports embed the effective configuration so every number in them can
//! be traced back to the settings that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editscript::{Layout, Policy, Strategy};
use crate::engine::BackendSpec;
use crate::perturb::PerturbConfig;
use crate::text::{Markers, TokenizeMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Tokenization applied to every utterance.
    pub mode: TokenizeMode,
    /// Order in which serialized scripts list their operations.
    pub layout: Layout,
    /// Whether malformed scripts and unplaceable ops abort or are skipped.
    pub policy: Policy,
    /// How apply resolves op positions.
    pub strategy: Strategy,
    /// Base seed for every deterministic random draw.
    pub seed: u64,
    /// In-flight request limit for HTTP backends.
    pub concurrency: usize,
    /// N-gram orders reported for BLEU, ROUGE and restoration scores.
    pub metric_orders: Vec<usize>,
    /// Directory for outputs when a command gets no explicit path.
    pub output_dir: PathBuf,
    pub markers: Markers,
    pub perturb: PerturbConfig,
    pub backends: Backends,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub stage1: BackendSpec,
    pub stage2: BackendSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: TokenizeMode::default(),
            layout: Layout::default(),
            policy: Policy::default(),
            strategy: Strategy::default(),
            seed: 0,
            concurrency: 4,
            metric_orders: vec![1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            markers: Markers::default(),
            perturb: PerturbConfig::default(),
            backends: Backends::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    /// Reads and validates a TOML config file. Unknown keys are errors.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let display = path.display().to_string();
        let content = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: display.clone(),
            source,
        })?;
        let config: Config = toml::from_str(&content).map_err(|source| ConfigError::Parse {
            path: display,
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be at least 1".into()));
        }
        if self.metric_orders.is_empty() {
            return Err(ConfigError::Invalid("metric_orders must not be empty".into()));
        }
        if let Some(&n) = self.metric_orders.iter().find(|&&n| n == 0) {
            return Err(ConfigError::Invalid(format!(
                "metric order {n} is invalid; orders start at 1"
            )));
        }
        let literals = self.markers.all();
        for (i, a) in literals.iter().enumerate() {
            if a.trim().is_empty() || a.contains(char::is_whitespace) {
                return Err(ConfigError::Invalid(format!(
                    "marker literal {a:?} must be non-empty and whitespace-free"
                )));
            }
            if literals[..i].contains(a) {
                return Err(ConfigError::Invalid(format!(
                    "marker literal {a:?} is used twice"
                )));
            }
        }
        self.perturb
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.backends
            .stage1
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("backends.stage1: {e}")))?;
        self.backends
            .stage2
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("backends.stage2: {e}")))?;
        Ok(())
    }

    /// Resolves an output path: absolute and explicit paths are kept,
    /// missing ones default to `output_dir/name`.
    pub fn output_path(&self, explicit: Option<&Path>, name: &str) -> PathBuf {
        match explicit {
            Some(path) => path.to_path_buf(),
            None => self.output_dir.join(name),
        }
    }
}
