//! Synthetic image recovery against a logit teacher and a sampled subset of
//! batch-norm alignment teachers.

mod assignment;
mod engine;
mod loss;

pub use assignment::{
    count_valid_subsets, enumerate_valid_subsets, sample_assignment, Coupling, SamplingRule, SelectionPolicy,
    TeacherAssignment,
};
pub use engine::{
    form_cross_class_batches, init_synthetic, iterations_for, prism_step, run_recovery, PixelBatch, StepLosses,
};
pub use loss::{bn_alignment_from_captures, bn_alignment_loss, prism_objective, Objective};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::pixel_bounds;
use crate::error::{Error, Result};
use crate::io::{write_atomic, DataContainer};
use crate::schedule::ScheduleKind;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub ipc: usize,
    pub lambda_bn: f64,
    pub iterations: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    /// Area-fraction range of the random resized crop.
    pub crop_range: (f32, f32),
    pub flip: bool,
    pub variable_iterations: bool,
    pub iter_range_factor: (f64, f64),
    pub schedule: ScheduleKind,
    pub policy: SelectionPolicy,
    pub coupling: Coupling,
    pub align_first: bool,
    pub seed: u64,
    pub workers: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            lambda_bn: 0.01,
            iterations: 200,
            lr: 0.05,
            betas: (0.5, 0.9),
            batch_size: 100,
            crop_range: (0.08, 1.0),
            flip: true,
            variable_iterations: false,
            iter_range_factor: (0.5, 1.5),
            schedule: ScheduleKind::Cosine,
            policy: SelectionPolicy::Pre,
            coupling: Coupling::Decoupled,
            align_first: false,
            seed: 0,
            workers: 1,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 || self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("recovery ipc, iterations and batch_size must be positive"));
        }
        if !(self.lambda_bn >= 0.0 && self.lambda_bn.is_finite()) {
            return Err(Error::invalid(format!("lambda_bn must be >= 0, got {}", self.lambda_bn)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("recovery lr must be positive, got {}", self.lr)));
        }
        let (lo, hi) = self.crop_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop_range ({lo}, {hi}) must satisfy 0 < min <= max <= 1")));
        }
        let (a, b) = self.iter_range_factor;
        if self.variable_iterations && !(a > 0.0 && a <= b) {
            return Err(Error::invalid(format!("iter_range_factor ({a}, {b}) must satisfy 0 < low <= high")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum ImageStatus {
    Ok,
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageProvenance {
    pub index: usize,
    pub class: usize,
    pub ipc_index: usize,
    pub batch_index: usize,
    pub source_id: u64,
    /// Assignment at the first step; later draws under the intra policy are
    /// counted in `assignments_drawn`.
    pub assignment: TeacherAssignment,
    pub policy: SelectionPolicy,
    pub assignments_drawn: usize,
    pub iterations: usize,
    pub final_logit_loss: f64,
    pub final_bn_loss: f64,
    /// BN alignment of the uncropped batch against the first assignment's
    /// subset, before and after optimization.
    pub bn_loss_start: f64,
    pub bn_loss_end: f64,
    pub status: ImageStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `[M, C, H, W]`, image `c * ipc + i` is the `i`-th image of class `c`.
    pub images: Tensor<f32>,
    pub labels: Vec<u16>,
    pub source_ids: Vec<u64>,
    pub ipc: usize,
    pub num_classes: usize,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    pub provenance: Vec<ImageProvenance>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    ipc: usize,
    num_classes: usize,
    images: Vec<ImageProvenance>,
}

/// Provenance sidecar written next to a synthetic dataset file.
pub fn provenance_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn pixel_bounds(&self) -> Vec<(f32, f32)> {
        pixel_bounds(&self.norm_mean, &self.norm_std)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() != self.num_classes * self.ipc {
            return Err(Error::invalid(format!(
                "{} images for {} classes x ipc {}",
                self.len(),
                self.num_classes,
                self.ipc
            )));
        }
        if self.images.shape().first() != Some(&self.len()) || self.source_ids.len() != self.len() {
            return Err(Error::shape("synthetic dataset", "image/label/id counts differ"));
        }
        if !self.provenance.is_empty() && self.provenance.len() != self.len() {
            return Err(Error::invalid("provenance must cover every image"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let container = DataContainer {
            images: self.images.clone(),
            labels: self.labels.clone(),
            split: vec![0; self.len()],
            ids: self.source_ids.clone(),
            num_classes: self.num_classes as u32,
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
        };
        container.write(path)?;
        let sidecar = Sidecar {
            ipc: self.ipc,
            num_classes: self.num_classes,
            images: self.provenance.clone(),
        };
        write_atomic(&provenance_path(path), &serde_json::to_vec_pretty(&sidecar)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = DataContainer::read(path)?;
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(provenance_path(path))?)?;
        if sidecar.num_classes != c.num_classes as usize {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "provenance sidecar disagrees on class count".into(),
            });
        }
        let ds = Self {
            images: c.images,
            labels: c.labels,
            source_ids: c.ids,
            ipc: sidecar.ipc,
            num_classes: sidecar.num_classes,
            norm_mean: c.norm_mean,
            norm_std: c.norm_std,
            provenance: sidecar.images,
        };
        ds.validate()?;
        Ok(ds)
    }
}
