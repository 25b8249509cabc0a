//! Run configuration: one TOML file with `[model]`, `[train]`, `[augment]`
//! and `[data]` sections. Missing keys take their defaults, unknown keys are
//! rejected by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::preprocess::{AugmentConfig, DataConfig};
use crate::train::TrainConfig;

/// File name of the effective configuration echoed into a run directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The complete effective configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        let unit = 1 << self.model.stages();
        let [h, w] = self.data.crop.unwrap_or([unit, unit]);
        self.model
            .check_geometry(h, w, self.data.phases.unwrap_or(1))
            .map_err(|e| Error::Config(format!("[data] {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr0 = 3e-3;
        cfg.train.seed = 17;
        cfg.model.num_blocks = 2;
        cfg.augment.p_rotate = 0.25;
        cfg.data.crop = Some([48, 48]);
        cfg.data.phases = Some(8);
        let text = cfg.to_toml();
        assert!(text.contains("[model]") && text.contains("[data]"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 7\n\n[data]\nphases = 8\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr0, TrainConfig::default().lr0);
        assert_eq!(cfg.data.phases, Some(8));
        assert_eq!(cfg.data.crop, None);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let err = RunConfig::from_toml("[optim]\nlr0 = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("optim"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::from_toml("[data]\nphases = 99\n").is_err());
        assert!(RunConfig::from_toml("[data]\ncrop = [30, 30]\n").is_err());
        assert!(RunConfig::from_toml("[model]\nembed_dim = \"big\"\n").is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load("/nonexistent/run.toml").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/run.toml"), "{err}");
    }
}
