use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::copy::InjectionModel;
use crate::backbone::{Backbone, LatentImage, PatchEncoding};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rngr::{fuse_subject_latent, Provenance, SubjectLatent};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Cached reference inputs: the inpainted latent and the encoder hidden
/// state it is fused with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub latent: LatentImage,
    pub encoding: PatchEncoding,
    pub provenance: Provenance,
}

impl SubjectRecord {
    pub fn hidden(&self) -> Array2<f64> {
        self.encoding.hidden_state()
    }

    /// `I''` under the model's current fusion weights.
    pub fn fused(&self, model: &InjectionModel) -> Result<SubjectLatent> {
        fuse_subject_latent(&self.latent, &self.encoding, &model.params, &model.fusion, self.provenance.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_completed: usize,
    pub global_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Content hash of the frozen denoiser the copy was trained against.
    pub base_hash: String,
    pub model: InjectionModel,
    pub subjects: Vec<SubjectRecord>,
    pub identifier: String,
    pub class_noun: String,
    pub progress: TrainProgress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
    /// The training config that produced this checkpoint, verbatim.
    #[serde(default)]
    pub train_config: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
        let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(CHECKPOINT_FORMAT as u64) {
            return Err(Error::Incompatible(format!(
                "checkpoint format {version:?}, expected {CHECKPOINT_FORMAT}"
            )));
        }
        Ok(serde_json::from_value(raw)?)
    }

    /// Fails unless the checkpoint was trained against `backbone`'s denoiser.
    pub fn ensure_base(&self, backbone: &Backbone) -> Result<()> {
        let actual = backbone.denoiser.content_hash();
        if actual != self.base_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint base hash {} does not match denoiser {actual}",
                self.base_hash
            )));
        }
        Ok(())
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
