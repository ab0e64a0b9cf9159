//! Checkpoints: prompt parameters as portable JSON plus run metadata and the
//! optimizer's momentum buffers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::OpennessSplit;
use crate::error::{HespError, Result};
use crate::model::{PromptConfig, PromptState};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub encoder_digest: String,
    /// Epochs completed.
    pub epoch: usize,
    pub class_names: Vec<String>,
    pub split: Option<OpennessSplit>,
    /// Training samples held out for threshold calibration.
    pub calibration_ids: Vec<String>,
    pub prompt: PromptConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: usize,
    pub velocity: PromptState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub meta: CheckpointMeta,
    pub prompts: PromptState,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HespError::Ingestion {
            path: path.to_path_buf(),
            row: None,
            reason: e.to_string(),
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(HespError::Compatibility(format!(
                "checkpoint format {} is not {CHECKPOINT_FORMAT}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// Fails unless the checkpoint was trained for `class_names` with the
    /// encoder whose digest is given.
    pub fn check_compatible(&self, class_names: &[String], encoder_digest: &str) -> Result<()> {
        if self.meta.class_names != class_names {
            return Err(HespError::Compatibility(format!(
                "checkpoint classes {:?} differ from {:?}",
                self.meta.class_names, class_names
            )));
        }
        if self.meta.encoder_digest != encoder_digest {
            return Err(HespError::Compatibility(
                "checkpoint was trained with a different encoder".into(),
            ));
        }
        Ok(())
    }
}
