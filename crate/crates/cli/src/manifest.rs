use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, Result};

/// Written next to every stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Hash of the stage's config section and upstream stage hashes.
    pub stage_hash: String,
    pub seed: u64,
    /// Upstream artifacts (logical name to SHA-256).
    pub inputs: BTreeMap<String, String>,
    /// Files written by the stage, relative to the stage directory.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub tool_version: String,
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl Manifest {
    pub fn path(stage_dir: &Path) -> PathBuf {
        stage_dir.join("manifest.json")
    }

    pub fn read(stage_dir: &Path) -> Result<Option<Self>> {
        let p = Self::path(stage_dir);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(p)?)?))
    }

    pub fn write(&self, stage_dir: &Path) -> Result<()> {
        prism_core::io::write_atomic(&Self::path(stage_dir), &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// True when every recorded output exists with the recorded hash.
    pub fn outputs_intact(&self, stage_dir: &Path) -> Result<bool> {
        for (name, hash) in &self.outputs {
            let p = stage_dir.join(name);
            if !p.exists() || &hash_file(&p)? != hash {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Like [`Manifest::outputs_intact`], but names the first bad file.
    pub fn verify_outputs(&self, stage_dir: &Path) -> Result<()> {
        for (name, hash) in &self.outputs {
            let p = stage_dir.join(name);
            if !p.exists() || &hash_file(&p)? != hash {
                return Err(CliError::HashMismatch { path: p });
            }
        }
        Ok(())
    }
}
