//! Dataset manifest: which files belong to which split, under which
//! simulation config, with content hashes for corruption detection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::pipeline::DatasetConfig;
use crate::error::{FafError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One simulated scene: degraded inputs, the reference, and the original
/// panchromatic image (kept for full-resolution evaluation).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairEntry {
    pub name: String,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub lr_ms: String,
    pub lr_pan: String,
    pub reference: String,
    pub pan: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub pairs: Vec<PairEntry>,
    /// sha256 hex digests keyed by relative path.
    pub hashes: BTreeMap<String, String>,
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl DatasetManifest {
    pub fn new(config: DatasetConfig) -> Self {
        DatasetManifest { config, pairs: Vec::new(), hashes: BTreeMap::new() }
    }

    pub fn add_pair(&mut self, base: &Path, entry: PairEntry) -> Result<()> {
        for rel in [&entry.lr_ms, &entry.lr_pan, &entry.reference, &entry.pan] {
            let digest = sha256_hex(&base.join(rel))?;
            self.hashes.insert(rel.clone(), digest);
        }
        self.pairs.push(entry);
        Ok(())
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| FafError::Format {
            path: path.display().to_string(),
            detail: format!("serialize failed: {e}"),
        })?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Parse and verify: every referenced file must exist and match its
    /// recorded digest, so any single-byte corruption is caught.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| FafError::Format {
                path: path.display().to_string(),
                detail: format!("parse failed: {e}"),
            })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for pair in &manifest.pairs {
            for rel in [&pair.lr_ms, &pair.lr_pan, &pair.reference, &pair.pan] {
                let full = base.join(rel);
                let recorded = manifest.hashes.get(rel).ok_or_else(|| FafError::Format {
                    path: path.display().to_string(),
                    detail: format!("no hash recorded for {rel}"),
                })?;
                let actual = sha256_hex(&full)?;
                if &actual != recorded {
                    return Err(FafError::Format {
                        path: full.display().to_string(),
                        detail: format!("hash mismatch: recorded {recorded}, actual {actual}"),
                    });
                }
            }
        }
        Ok((manifest, base))
    }
}
