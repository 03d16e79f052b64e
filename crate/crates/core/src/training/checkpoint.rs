use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Mode, Model, TrainState};
use crate::bgnn::BgnnError;
use crate::channel::SystemConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Mismatch(#[from] BgnnError),
}

/// JSON checkpoint: the trained model plus, while training is in progress,
/// the state needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub system: SystemConfig,
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(seed: u64, system: SystemConfig, model: Model) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            mode: model.mode,
            system,
            model,
            train_state: None,
        }
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.mode != ckpt.model.mode {
            return Err(BgnnError::ConfigMismatch(format!(
                "header mode {} disagrees with model mode {}",
                ckpt.mode, ckpt.model.mode
            ))
            .into());
        }
        ckpt.model.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
