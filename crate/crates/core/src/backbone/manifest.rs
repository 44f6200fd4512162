use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One weight file of a pretrained component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetEntry {
    /// Component role: `image_encoder`, `text_encoder`, `codec`, `denoiser`, `inpainter`.
    pub component: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Model-asset manifest: weight paths plus content hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetManifest {
    pub schema_version: u32,
    pub assets: Vec<AssetEntry>,
}

impl AssetManifest {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported manifest version {}", manifest.schema_version),
            ));
        }
        Ok(manifest)
    }

    /// Re-hashes every asset under `root` and reports the first mismatch.
    pub fn verify(&self, root: impl AsRef<Path>) -> Result<()> {
        for entry in &self.assets {
            let path = root.as_ref().join(&entry.path);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let actual = hex::encode(Sha256::digest(&bytes));
            if !actual.eq_ignore_ascii_case(&entry.sha256) {
                return Err(Error::Incompatible(format!(
                    "{} ({}) hash {actual} does not match manifest {}",
                    entry.component,
                    entry.path.display(),
                    entry.sha256
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, component: &str) -> Option<&AssetEntry> {
        self.assets.iter().find(|a| a.component == component)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("unet.bin"), b"weights").unwrap();
        let mut manifest = AssetManifest {
            schema_version: 1,
            assets: vec![AssetEntry {
                component: "denoiser".into(),
                path: "unet.bin".into(),
                sha256: hex::encode(Sha256::digest(b"weights")),
            }],
        };
        manifest.verify(dir.path()).unwrap();
        manifest.assets[0].sha256 = hex::encode(Sha256::digest(b"other"));
        assert!(matches!(manifest.verify(dir.path()), Err(Error::Incompatible(_))));
    }
}
