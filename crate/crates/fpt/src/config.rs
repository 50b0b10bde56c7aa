//! Experiment configuration: one file (JSON or TOML) describing the model,
//! initialization, freeze policy, task, and training schedule, with dotted
//! `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::TrainConfig;
use crate::models::ModelSpec;
use crate::tasks::TaskConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("override key {0:?} does not exist in the config")]
    UnknownKey(String),
    #[error("override {key}={value}: {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("config error: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKindName {
    DefaultGaussian,
    OrthogonalInput,
    StatisticsOnly,
    FromCheckpoint,
}

/// Init scheme as written in config files; checkpoint-backed schemes name a
/// source file resolved at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default = "default_init_kind")]
    pub kind: InitKindName,
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    #[serde(default)]
    pub source: Option<PathBuf>,
}

fn default_init_kind() -> InitKindName {
    InitKindName::DefaultGaussian
}
fn default_sigma() -> f32 {
    0.02
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            kind: default_init_kind(),
            sigma: default_sigma(),
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub init: InitConfig,
    /// Named freeze policy, e.g. "fpt", "output_only", "full".
    pub policy: String,
    pub task: TaskConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Loads JSON or TOML (by extension), applies overrides, validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut value: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => {
                let v: toml::Value =
                    toml::from_str(&text).map_err(|e| ConfigError::Parse {
                        path: path.to_path_buf(),
                        message: e.to_string(),
                    })?;
                serde_json::to_value(v).expect("toml maps to json")
            }
            _ => serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?,
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value.clone()).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.task
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        crate::policy::FreezePolicy::by_name(&self.policy)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match (self.init.kind, &self.init.source) {
            (InitKindName::StatisticsOnly | InitKindName::FromCheckpoint, None) => {
                return Err(ConfigError::Invalid(
                    "this init kind needs a source checkpoint path".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Cross-checks the model's interface against the task; commands that
    /// feed the task through the model call this before any compute.
    pub fn validate_task_model(&self) -> Result<(), ConfigError> {
        if self.model.d_in != self.task.token_dim() {
            return Err(ConfigError::Invalid(format!(
                "model d_in {} does not match the task token dimension {}",
                self.model.d_in,
                self.task.token_dim()
            )));
        }
        if self.model.d_out != self.task.output_dim() {
            return Err(ConfigError::Invalid(format!(
                "model d_out {} does not match the task output dimension {}",
                self.model.d_out,
                self.task.output_dim()
            )));
        }
        let per_token = self.model.readout_mode == crate::models::ReadoutMode::PerToken;
        if per_token != self.task.per_token() {
            return Err(ConfigError::Invalid(format!(
                "task wants {} readout but the model uses {:?}",
                if self.task.per_token() { "per-token" } else { "last-token" },
                self.model.readout_mode
            )));
        }
        if self.task.max_tokens() > self.model.max_len {
            return Err(ConfigError::Invalid(format!(
                "task sequences reach {} tokens but the model max_len is {}",
                self.task.max_tokens(),
                self.model.max_len
            )));
        }
        Ok(())
    }

    /// The fully resolved config as JSON, embedded in emitted summaries.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }
}

/// Applies one `dotted.key=value` override to a JSON tree. Intermediate path
/// segments must exist (you can't invent a new section), but the final key
/// may be absent so that defaulted fields are settable; typos in the final
/// key are still rejected when the tree is deserialized with
/// `deny_unknown_fields`. The value is parsed as JSON when possible and
/// falls back to a string.
pub fn apply_override(value: &mut serde_json::Value, ov: &str) -> Result<(), ConfigError> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(ov.to_string()))?;
    let mut node = &mut *value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        if i + 1 == parts.len() {
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    Err(ConfigError::UnknownKey(key.to_string()))
}
