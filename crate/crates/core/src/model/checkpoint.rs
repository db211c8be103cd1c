use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ReferenceModel, Seq2seqModel, Vocab};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "qpweight-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container for a reference model. Floats are written in shortest
/// round-trip form and parsed exactly, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &ReferenceModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            vocab: model.vocab().clone(),
            params: model.params().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<ReferenceModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        ReferenceModel::from_parts(self.vocab, self.config, self.params)
    }
}

pub fn save_checkpoint(path: &Path, model: &ReferenceModel) -> Result<()> {
    if let Some(bad) = model.params().iter().find(|p| !p.is_finite()) {
        return Err(Error::Divergence(format!("refusing to save non-finite parameter {bad}")));
    }
    let json = serde_json::to_string(&Checkpoint::from_model(model))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ReferenceModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Validation(format!(
        "{}: not a checkpoint: {e}",
        path.display()
    )))?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 6,
            pos_dim: 2,
            seed: 17,
            ..ModelConfig::default()
        };
        let model = ReferenceModel::new(Vocab::synthetic(9), cfg).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits = |m: &ReferenceModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&model), bits(&back));
        assert_eq!(back.vocab(), model.vocab());
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        fs::write(&path, "{\"hello\": 1}").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Validation(_))));
    }
}
