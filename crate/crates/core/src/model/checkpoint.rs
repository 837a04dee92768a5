//! JSON checkpoints: config, flat parameters, segmentation map, reference snapshot.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, Segment};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "bdlab-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub segments: Vec<Segment>,
    pub params: Vec<f64>,
    pub reference: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(state: &ModelState) -> Self {
        Self {
            format: CHECKPOINT_MAGIC.to_string(),
            config: state.config().clone(),
            segments: state.layout().segments().to_vec(),
            params: state.params().to_vec(),
            reference: state.reference().to_vec(),
        }
    }

    pub fn into_state(self) -> Result<ModelState> {
        let state = ModelState::from_parts(self.config, self.params, self.reference)?;
        if state.layout().segments() != self.segments.as_slice() {
            return Err(Error::State(
                "checkpoint segmentation map does not match its config".into(),
            ));
        }
        Ok(state)
    }
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_state(state))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if ckpt.format != CHECKPOINT_MAGIC {
        return Err(Error::format(
            path,
            format!("expected format `{CHECKPOINT_MAGIC}`, found `{}`", ckpt.format),
        ));
    }
    ckpt.into_state()
}
