//! Experiment config files (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taco_core::nn::resnet::ResNetConfig;
use taco_core::policy::{PolicyConfig, SensorMode};
use taco_core::rollout::SyntheticSensorModel;
use taco_core::trainer::TrainConfig;

use crate::error::{CliError, Result, Tag};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides `data.train`.
pub const DATA_DIR_ENV: &str = "TACO_DATA_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Desk,
    Tiny,
    Resnet18,
}

impl Backbone {
    pub fn config(self) -> ResNetConfig {
        match self {
            Self::Desk => ResNetConfig::desk(),
            Self::Tiny => ResNetConfig::tiny(),
            Self::Resnet18 => ResNetConfig::resnet18(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsConfig {
    #[serde(default)]
    pub backbone: Backbone,
    /// Hidden layer sizes of every tactile MLP encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tactile_hidden: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Episode directory, or a directory of episode directories.
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SensorMode>,
    pub data: DataConfig,
    #[serde(default)]
    pub observations: ObservationsConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModelFile {
    pub schema_version: u32,
    /// Name used for reports and plots.
    pub sensor: String,
    pub model: SyntheticSensorModel,
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(CliError::new("config", format!("{}: unsupported schema_version {v} (expected {SCHEMA_VERSION})", path.display())));
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("input", format!("{}: {e}", path.display())))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| CliError::new("config", format!("{}: {}", path.display(), e.message())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses a config and resolves data paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = parse(&read(path)?, path)?;
        check_version(cfg.schema_version, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            cfg.data.train = PathBuf::from(dir);
        }
        cfg.data.train = resolve(base, &cfg.data.train);
        cfg.data.heldout = cfg.data.heldout.as_deref().map(|h| resolve(base, h));
        cfg.train.validate().tag("config")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).tag("config")
    }
}

impl SensorModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = parse(&read(path)?, path)?;
        check_version(f.schema_version, path)?;
        f.model.validate().tag("config")?;
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in [
            "schema_version = 1\n[data]\ntrain = \"d\"\n[train]\nlr = 1e-4\nlearning_rate = 1\n",
            "schema_version = 1\nmystery = 3\n[data]\ntrain = \"d\"\n",
            "schema_version = 1\n[data]\ntrain = \"d\"\n[policy]\nhiden_dim = 3\n",
        ] {
            let (_d, path) = write(text);
            assert_eq!(ExperimentConfig::load(&path).unwrap_err().kind, "config", "{text}");
        }
    }

    #[test]
    fn schema_version_is_checked() {
        let (_d, path) = write("schema_version = 2\n[data]\ntrain = \"d\"\n");
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.message.contains("schema_version 2"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let (d, path) = write("schema_version = 1\nmode = \"visuotactile\"\n[data]\ntrain = \"demos\"\n[policy]\nhidden_dim = 32\n[train]\nlr = 5e-4\n[train.aug]\njitter = 0.0\n");
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train, d.path().join("demos"));
        assert_eq!(cfg.train.aug.jitter, 0.0);
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
