//! Run manifest listing every artifact with its SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::error::Result;

pub const VERSION_TAG: &str = concat!("pie-", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub command: String,
    pub config_echo: serde_json::Value,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub artifact_paths: Vec<Artifact>,
    pub version_tag: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, config_echo: serde_json::Value, seed: u64, dataset_fingerprint: Option<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_echo,
            seed,
            dataset_fingerprint,
            artifact_paths: Vec::new(),
            version_tag: VERSION_TAG.to_string(),
        }
    }

    /// Hashes `path`, which must live inside `dir`.
    pub fn add(&mut self, dir: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.artifact_paths.push(Artifact {
            path: rel.to_string_lossy().into_owned(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Writes `manifest.json` into `dir` atomically.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    /// Returns the first artifact that is missing or whose hash differs.
    pub fn verify(&self, dir: &Path) -> Option<String> {
        self.artifact_paths
            .iter()
            .find(|a| sha256_file(&dir.join(&a.path)).ok().as_deref() != Some(a.sha256.as_str()))
            .map(|a| a.path.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, b"abc").unwrap();
        let mut m = RunManifest::new("train", serde_json::json!({"x": 1}), 4, None);
        m.add(dir.path(), &f).unwrap();
        assert_eq!(m.artifact_paths[0].path, "a.txt");
        assert_eq!(
            m.artifact_paths[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let p = m.write(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.verify(dir.path()), None);
        std::fs::write(&f, b"abd").unwrap();
        assert_eq!(m.verify(dir.path()), Some("a.txt".into()));
    }
}
