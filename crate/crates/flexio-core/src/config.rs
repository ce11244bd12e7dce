//! Single JSON run configuration with `model`, `stft`, `train`, and `data`
//! sections. Unknown keys anywhere are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::stft::StftConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `manifest.jsonl` of the training set; scene paths are relative to it.
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parse and validate; the `stft` section overrides the model's
    /// transform settings.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.model.stft = cfg.stft;
        cfg.model.validate()?;
        Ok(cfg)
    }
}
