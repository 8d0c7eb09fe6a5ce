use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Everything a training run needs. Every field has a default, so a config
/// file may list only what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Write `checkpoint-epochNNN.glck` every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Single-threaded execution, no prefetching.
    pub strict_deterministic: bool,
    /// Batches assembled ahead of time on a worker thread (0: inline).
    pub prefetch: usize,
    /// Emit SVG loss/accuracy curves next to the metrics.
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            batch_size: 8,
            epochs: 30,
            learning_rate: 0.003,
            momentum: 0.9,
            seed: 0,
            data_dir: None,
            out_dir: None,
            checkpoint_every: 0,
            strict_deterministic: true,
            prefetch: 0,
            plots: false,
        }
    }
}

impl RunConfig {
    /// Large preset: full-scale model, 100 epochs.
    pub fn full_scale() -> Self {
        RunConfig {
            model: ModelConfig::full_scale(),
            epochs: 100,
            ..RunConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Checks that referenced paths exist.
    pub fn check_paths(&self) -> Result<()> {
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "dataset directory not found",
                    ),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn prefetch_depth(&self) -> usize {
        if self.strict_deterministic {
            0
        } else {
            self.prefetch
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_documents_override_nested_fields() {
        let c = RunConfig::from_json(r#"{"epochs": 3, "model": {"gla": {"modules": 2}}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.gla.modules, 2);
        assert_eq!(c.model.gla.heads, 8);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_json(r#"{"epoch": 3}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"momentum": 1.0}"#),
            Err(Error::Config(_))
        ));
        let err = RunConfig::from_json(r#"{"model": {"projection": {"dim": 90}}}"#).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }
}
