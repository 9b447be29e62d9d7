//! Run configuration: a flat TOML table holding every training
//! hyperparameter plus the file paths, resolved as defaults < file < flags.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use skelstory::trainer::TrainingConfig;
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("config file {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },
}

impl ConfigError {
    pub fn is_file_error(&self) -> bool {
        matches!(self, Self::Read { .. })
    }
}

/// Corpus locations and run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub story_train: PathBuf,
    pub story_valid: PathBuf,
    pub story_test: PathBuf,
    pub compression_train: PathBuf,
    pub compression_valid: PathBuf,
    pub compression_test: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Empty selects `<checkpoint_dir>/<subcommand>.metrics.jsonl`.
    pub metrics_log: PathBuf,
    /// Adds elapsed seconds to each metrics record, which makes logs of
    /// identical runs differ.
    pub log_wall_time: bool,
}

impl Default for PathConfig {
    fn default() -> Self {
        let data = Path::new("data");
        Self {
            story_train: data.join("story_train.jsonl"),
            story_valid: data.join("story_valid.jsonl"),
            story_test: data.join("story_test.jsonl"),
            compression_train: data.join("compression_train.tsv"),
            compression_valid: data.join("compression_valid.tsv"),
            compression_test: data.join("compression_test.tsv"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics_log: PathBuf::new(),
            log_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub paths: PathConfig,
}

fn table_of<T: Serialize>(value: &T) -> Table {
    match Value::try_from(value).expect("config structs serialize to TOML") {
        Value::Table(t) => t,
        _ => unreachable!("config structs serialize to tables"),
    }
}

/// Parses the value half of a `key=value` override. Anything that is not a
/// TOML literal is taken as a bare string, so paths need no quoting.
fn parse_override_value(raw: &str, default: &Value) -> Value {
    let parsed = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, default) {
        (Some(v), Value::String(_)) if !v.is_str() => Value::String(raw.to_string()),
        (Some(v), _) => v,
        (None, _) => Value::String(raw.to_string()),
    }
}

pub fn split_override(raw: &str) -> Result<(String, String), ConfigError> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::BadOverride(raw.to_string())),
    }
}

/// Deserializes one section. On failure each key is retried alone over the
/// defaults so the error names the offending key.
fn typed<T: Serialize + DeserializeOwned + Default>(table: Table) -> Result<T, ConfigError> {
    let whole = Value::Table(table.clone()).try_into::<T>();
    whole.map_err(|e| {
        let base = table_of(&T::default());
        for (key, value) in &table {
            let mut single = base.clone();
            single.insert(key.clone(), value.clone());
            if let Err(e) = Value::Table(single).try_into::<T>() {
                return ConfigError::BadValue {
                    key: key.clone(),
                    message: e.message().to_string(),
                };
            }
        }
        ConfigError::BadValue {
            key: "<config>".into(),
            message: e.message().to_string(),
        }
    })
}

impl RunConfig {
    /// Merges the optional config file and the `key=value` overrides (later
    /// overrides win) over the defaults. Unknown keys are rejected.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let defaults = Self::default().to_table();
        let mut merged = defaults.clone();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Syntax {
                    path: path.to_path_buf(),
                    message: e.message().to_string(),
                })?;
            for (key, value) in table {
                if !defaults.contains_key(&key) {
                    return Err(ConfigError::UnknownKey { key });
                }
                merged.insert(key, value);
            }
        }
        for (key, raw) in overrides {
            let default = defaults
                .get(key)
                .ok_or_else(|| ConfigError::UnknownKey { key: key.clone() })?;
            merged.insert(key.clone(), parse_override_value(raw, default));
        }
        Self::from_table(merged)
    }

    fn from_table(merged: Table) -> Result<Self, ConfigError> {
        let training_keys = table_of(&TrainingConfig::default());
        let (training, paths): (Table, Table) = merged
            .into_iter()
            .partition(|(k, _)| training_keys.contains_key(k));
        Ok(Self {
            training: typed(training)?,
            paths: typed(paths)?,
        })
    }

    /// One flat table with every key, defaulted values included.
    pub fn to_table(&self) -> Table {
        let mut t = table_of(&self.training);
        t.extend(table_of(&self.paths));
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("a flat table always serializes")
    }

    pub fn metrics_log_for(&self, subcommand: &str) -> PathBuf {
        if self.paths.metrics_log.as_os_str().is_empty() {
            self.paths
                .checkpoint_dir
                .join(format!("{subcommand}.metrics.jsonl"))
        } else {
            self.paths.metrics_log.clone()
        }
    }
}
