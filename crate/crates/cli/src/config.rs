//! Run configuration for `l2g train`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use l2gnet::metrics::DEFAULT_PERCENTILE;
use l2gnet::segmodel::{ModelConfig, OptimizerSettings, TrainConfig};
use serde::{Deserialize, Serialize};

/// Strict JSON schema: unknown keys are rejected by name, at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub optimizer_settings: OptimizerSettings,
    pub deterministic: bool,
    pub percentile: f64,
    pub warmup_samples: usize,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            train_data: PathBuf::from("train.l2gs"),
            val_data: None,
            output_dir: PathBuf::from("run"),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            optimizer_settings: t.optimizer_settings,
            deterministic: t.deterministic,
            percentile: DEFAULT_PERCENTILE,
            warmup_samples: t.warmup_samples,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; relative paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.train_data = base.join(&cfg.train_data);
        cfg.val_data = cfg.val_data.map(|p| base.join(p));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer.clone(),
            optimizer_settings: self.optimizer_settings,
            deterministic: self.deterministic,
            percentile: self.percentile,
            warmup_samples: self.warmup_samples,
        }
    }

    /// Checks settings and every path before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if !self.train_data.is_file() {
            bail!("train_data {} does not exist", self.train_data.display());
        }
        if let Some(v) = &self.val_data {
            if !v.is_file() {
                bail!("val_data {} does not exist", v.display());
            }
        }
        if self.output_dir.exists() && !self.output_dir.is_dir() {
            bail!("output_dir {} is not a directory", self.output_dir.display());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = serde_json::from_str::<RunConfig>(r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = serde_json::from_str::<RunConfig>(r#"{"model": {"refs": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("refs"), "{err}");
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
