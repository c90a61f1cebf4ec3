//! The single-file experiment configuration and its `--set key=value`
//! override mechanism. Configs are TOML so runs stay diffable and
//! archivable; unknown keys are rejected.

use crate::data::{NanPolicy, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub descriptor: PathBuf,
    #[serde(default)]
    pub nan_policy: NanPolicy,
    /// Keep only the first `max_nodes` stations (desk-scale runs).
    #[serde(default)]
    pub max_nodes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output_dir: PathBuf,
    pub variant: String,
    /// Seeds for the ablation suite (and the default train seed list).
    pub seeds: Vec<u64>,
    /// Fixed run-directory name instead of a timestamped one.
    pub run_name: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            output_dir: PathBuf::from("runs"),
            variant: "full".into(),
            seeds: vec![1, 2, 3],
            run_name: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Load, apply overrides, resolve the descriptor path relative to the
    /// config file, and validate everything that can be validated before
    /// touching data.
    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for setting in overrides {
            apply_override(&mut value, setting)?;
        }
        let mut config: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if config.dataset.descriptor.is_relative() {
            if let Some(dir) = path.parent() {
                config.dataset.descriptor = dir.join(&config.dataset.descriptor);
            }
        }
        config.split.validate()?;
        config.train.validate()?;
        config.run.variant.parse::<crate::model::Variant>()?;
        if let Some(0) = config.dataset.max_nodes {
            return Err(Error::Config("max_nodes must be >= 1 when set".into()));
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// `--set section.key=value`; the value is parsed as a TOML literal and
/// falls back to a bare string.
fn apply_override(root: &mut toml::Value, setting: &str) -> Result<()> {
    let (path, raw) = setting.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{setting}` must look like key.path=value"))
    })?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` is not a table in `{path}`")))?
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("cannot set `{path}`: parent is not a table")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}
