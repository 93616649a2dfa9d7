//! Run configuration: a TOML file with dotted sections, method presets and a
//! stable content hash.

use std::path::{Path, PathBuf};

use prism_core::optim::OptimKind;
use prism_core::recovery::{Coupling, RecoveryConfig};
use prism_core::relabel::RelabelConfig;
use prism_core::schedule::ScheduleKind;
use prism_core::student::ValidationConfig;
use prism_core::zoo::SqueezeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "PRISM_OUTPUT_ROOT";

/// Method variants accepted in `variant`.
pub const VARIANTS: [&str; 7] = ["custom", "sre2l", "dual", "prism-k2", "prism-k3", "prism-k4", "single-teacher"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// `shapes` for the built-in generator, otherwise a `PRSMDATA` file or
    /// an image directory.
    pub source: String,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Generator seed, independent of the run seed so reseeded runs share data.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: "shapes".into(),
            classes: 10,
            per_class: 200,
            image_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSpec {
    /// Architecture families; the first is the primary teacher.
    pub archs: Vec<String>,
    pub k_max: usize,
    pub diverse: bool,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            archs: vec![
                "convnet-deep".into(),
                "shuffle".into(),
                "inverted-residual".into(),
                "depthwise-sep".into(),
            ],
            k_max: 4,
            diverse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversitySpec {
    pub batch_size: usize,
}

impl Default for DiversitySpec {
    fn default() -> Self {
        Self { batch_size: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// One of [`VARIANTS`]; anything but `custom` overwrites the sampling
    /// fields of `recovery` and `pool.k_max`.
    pub variant: String,
    /// `standard` or `recovery-only`.
    pub protocol: String,
    pub dataset: DatasetSpec,
    pub pool: PoolSpec,
    pub squeeze: SqueezeConfig,
    pub recovery: RecoveryConfig,
    pub relabel: RelabelConfig,
    pub validation: ValidationConfig,
    pub diversity: DiversitySpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            variant: "prism-k4".into(),
            protocol: "standard".into(),
            dataset: DatasetSpec::default(),
            pool: PoolSpec::default(),
            squeeze: SqueezeConfig::default(),
            recovery: RecoveryConfig::default(),
            relabel: RelabelConfig::default(),
            validation: ValidationConfig::default(),
            diversity: DiversitySpec::default(),
        }
    }
}

/// Sets the recovery sampling rule and `k_max` for a named variant.
pub fn apply_variant(cfg: &mut RunConfig, variant: &str) -> Result<()> {
    let r = &mut cfg.recovery;
    match variant {
        "custom" => {}
        "sre2l" => {
            r.coupling = Coupling::Coupled;
            r.align_first = true;
            cfg.pool.k_max = 1;
        }
        "single-teacher" => {
            r.coupling = Coupling::Coupled;
            r.align_first = false;
            cfg.pool.k_max = 1;
        }
        "dual" => {
            r.coupling = Coupling::Decoupled;
            r.align_first = false;
            cfg.pool.k_max = 1;
        }
        "prism-k2" | "prism-k3" | "prism-k4" => {
            r.coupling = Coupling::Decoupled;
            r.align_first = false;
            cfg.pool.k_max = variant[7..].parse().unwrap();
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown variant {other:?}; expected one of {VARIANTS:?}"
            )))
        }
    }
    cfg.variant = variant.to_string();
    Ok(())
}

/// Student protocol presets. `recovery-only` trains on hard labels with
/// momentum SGD, lr 0.1 and a linear schedule for 90 epochs.
pub fn apply_protocol(cfg: &mut RunConfig, protocol: &str) -> Result<()> {
    match protocol {
        "standard" => {}
        "recovery-only" => {
            let v = &mut cfg.validation;
            v.use_soft_labels = false;
            v.optimizer = OptimKind::Sgd;
            v.lr = 0.1;
            v.momentum = 0.9;
            v.weight_decay = 1e-4;
            v.schedule = ScheduleKind::Linear;
            v.epochs = 90;
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown protocol {other:?}; expected standard or recovery-only"
            )))
        }
    }
    cfg.protocol = protocol.to_string();
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies presets, propagates the global seed and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let variant = self.variant.clone();
        apply_variant(&mut self, &variant)?;
        let protocol = self.protocol.clone();
        apply_protocol(&mut self, &protocol)?;
        let seed = self.seed;
        self.with_seed(seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.recovery.seed = seed;
        self.relabel.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool.archs.is_empty() {
            return Err(CliError::Config("pool.archs is empty".into()));
        }
        if self.pool.k_max == 0 || self.pool.k_max > self.pool.archs.len() {
            return Err(CliError::Config(format!(
                "pool.k_max {} outside 1..={}",
                self.pool.k_max,
                self.pool.archs.len()
            )));
        }
        self.squeeze.validate()?;
        self.recovery.validate()?;
        self.relabel.validate()?;
        self.validation.validate()?;
        Ok(())
    }

    /// Output directory, resolved against `PRISM_OUTPUT_ROOT` when relative.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Canonical JSON without fields that do not affect results.
    pub fn canonical_json(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.recovery.workers = 0;
        serde_json::to_value(&c).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_order_output_dir_and_workers() {
        let a = RunConfig::from_toml("seed = 3\n[recovery]\nipc = 2\nlambda_bn = 0.5\n").unwrap();
        let b = RunConfig::from_toml(
            "output_dir = \"elsewhere\"\nseed = 3\n[recovery]\nworkers = 4\nlambda_bn = 0.5\nipc = 2\n",
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml("seed = 4\n[recovery]\nipc = 2\nlambda_bn = 0.5\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn presets_set_sampling_rule() {
        let cfg = RunConfig::from_toml("variant = \"sre2l\"").unwrap();
        assert_eq!(cfg.pool.k_max, 1);
        assert!(cfg.recovery.align_first);
        assert_eq!(cfg.recovery.coupling, Coupling::Coupled);
        let cfg = RunConfig::from_toml("variant = \"prism-k3\"\nprotocol = \"recovery-only\"").unwrap();
        assert_eq!(cfg.pool.k_max, 3);
        assert!(!cfg.validation.use_soft_labels);
        assert_eq!(cfg.validation.schedule, ScheduleKind::Linear);
        assert!(RunConfig::from_toml("variant = \"prism-k9\"").is_err());
        assert!(RunConfig::from_toml("schema_version = 2").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }
}
