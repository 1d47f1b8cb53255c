//! Checkpoint file: a header line naming the format version followed by a
//! JSON document of the whole [`Model`]. Floats are written in shortest
//! round-trip form, so `load(save(m)) == m` bit for bit.

use std::fs;
use std::path::Path;

use super::Model;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cvrcf-checkpoint 1";

impl Model {
    pub fn to_checkpoint_string(&self) -> Result<String> {
        let body = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(format!("{CHECKPOINT_FORMAT}\n{body}\n"))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        if header.trim_end() != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported header `{header}`, expected `{CHECKPOINT_FORMAT}`"
            )));
        }
        let mut model: Model = serde_json::from_str(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.rebuild_indices()?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let text = model.to_checkpoint_string()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Model::from_checkpoint_str(&text)
}
