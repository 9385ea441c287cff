//! Run manifest: configs plus content hashes of every artifact.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mergecal_core::{CoreError, Result};

use crate::config::PipelineConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub run_id: String,
    pub config: PipelineConfig,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Wall-clock creation time; informational only and excluded from any
    /// determinism comparison.
    pub created_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl PipelineManifest {
    pub fn new(config: &PipelineConfig) -> Self {
        PipelineManifest {
            run_id: config.run_id(),
            config: config.clone(),
            artifacts: BTreeMap::new(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Hashes a file under the run directory and records it.
    pub fn record(&mut self, root: &Path, name: &str, rel_path: &str) -> Result<()> {
        let bytes = std::fs::read(root.join(rel_path))?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactRecord {
                path: rel_path.to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Checks that every artifact exists, hashes match, and model files
    /// still parse and validate against their spec.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (name, rec) in &self.artifacts {
            let full = root.join(&rec.path);
            let bytes = std::fs::read(&full).map_err(|e| {
                CoreError::InvalidConfig(format!("artifact `{name}` missing at {full:?}: {e}"))
            })?;
            let hash = sha256_hex(&bytes);
            if hash != rec.sha256 {
                return Err(CoreError::InvalidConfig(format!(
                    "artifact `{name}` hash mismatch: manifest {} vs file {hash}",
                    rec.sha256
                )));
            }
            if rec.path.starts_with("models/") {
                mergecal_core::model::load_model(&full)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        let cfg = PipelineConfig::default();
        let mut manifest = PipelineManifest::new(&cfg);
        manifest.record(dir.path(), "a", "a.txt").unwrap();
        manifest.verify(dir.path()).unwrap();

        std::fs::write(dir.path().join("a.txt"), b"tampered").unwrap();
        assert!(manifest.verify(dir.path()).is_err());
    }
}
