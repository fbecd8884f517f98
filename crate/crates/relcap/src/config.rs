//! Whole-run configuration: one document covering every pipeline stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, DataError};
use crate::model::ModelConfig;
use crate::trainer::{Phase2Config, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// Feasibility threshold on the gradient inner product.
    pub xi: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig { xi: 0.0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("selection threshold must be finite, got {0}")]
    Threshold(f64),
    #[error("model {0} must be positive")]
    Dim(&'static str),
    #[error("lrelu_slope must lie in [0, 1), got {0}")]
    Slope(f64),
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every knob of a run, grouped by stage. Any subset may appear in a config
/// file; the rest fall back to defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub select: SelectConfig,
    pub phase2: Phase2Config,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate()?;
        self.train.validate()?;
        self.phase2.validate()?;
        let m = &self.model;
        for (name, v) in [
            ("embed_dim", m.embed_dim),
            ("hidden_dim", m.hidden_dim),
            ("attn_dim", m.attn_dim),
            ("decoder_att_dim", m.decoder_att_dim),
            ("decoder_lang_dim", m.decoder_lang_dim),
        ] {
            if v == 0 {
                return Err(ConfigError::Dim(name));
            }
        }
        if !m.lrelu_slope.is_finite() || !(0.0..1.0).contains(&m.lrelu_slope) {
            return Err(ConfigError::Slope(m.lrelu_slope));
        }
        if !self.select.xi.is_finite() {
            return Err(ConfigError::Threshold(self.select.xi));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, text: &str) -> std::path::PathBuf {
        let p = dir.path().join("run.json");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_validate_and_serialize_every_field() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        for key in
            ["captions_per_question", "use_caa", "lr_factor", "xi", "batch_size", "hidden_dim"]
        {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }

    #[test]
    fn partial_files_keep_defaults_elsewhere() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, r#"{"train": {"lr": 0.01}, "select": {"xi": 0.25}}"#);
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.select.xi, 0.25);
        assert_eq!(cfg.data, DataConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, r#"{"trian": {"lr": 0.01}}"#);
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));
        let nested = write(&dir, r#"{"train": {"learning_rate": 0.01}}"#);
        assert!(matches!(RunConfig::load(&nested), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn section_validators_fire_through_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, r#"{"data": {"captions_per_question": 1}}"#);
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Data(_))));
        let path = write(&dir, r#"{"model": {"hidden_dim": 0}}"#);
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Dim("hidden_dim"))));
        let path = write(&dir, r#"{"train": {"batch_size": 0}}"#);
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Train(_))));
    }

    #[test]
    fn nonfinite_threshold_is_rejected() {
        let cfg = RunConfig {
            select: SelectConfig { xi: f64::NAN },
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ConfigError::Threshold(_))));
    }
}
