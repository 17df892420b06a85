use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svda_core::attention::Mechanism;
use svda_core::datagen::DatasetSpec;
use svda_core::harness::TrainConfig;
use svda_core::model::ModelConfig;

use crate::error::{CliError, Result};

/// Everything one run needs, read from a strict JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// The default toy experiment writing into `output_dir`.
    pub fn toy_default(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: ModelConfig::toy_default(Mechanism::Svda),
            train: TrainConfig::toy_default(),
            data: DatasetSpec::toy_default(),
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> svda_core::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if (self.data.height, self.data.width) != (self.model.image_h, self.model.image_w) {
            return Err(svda_core::Error::InvalidConfig(format!(
                "data is {}x{} but the model expects {}x{}",
                self.data.height, self.data.width, self.model.image_h, self.model.image_w
            )));
        }
        if self.model.channels != 1 {
            return Err(svda_core::Error::InvalidConfig(
                "generated scenes are single-channel; set model.channels to 1".into(),
            ));
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
