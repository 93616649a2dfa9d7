//! Ensemble soft labels with ground-truth mixing.
//!
//! Soft-label file layout:
//!
//! ```text
//! magic "PRSMLBL" | version u32 | rows M u32 | classes C u32 | M*C f32
//! ```
//!
//! plus a JSON sidecar holding the crop replayed for each row.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{sample_crop, CropParams};
use crate::autodiff::{Graph, SoftLoss};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader, ByteWriter};
use crate::layers::Mode;
use crate::recovery::SyntheticDataset;
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use crate::zoo::{TeacherModel, TeacherPool};

pub const LABEL_MAGIC: &[u8; 7] = b"PRSMLBL";
pub const LABEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelabelConfig {
    /// Loss the targets are intended for; stored as metadata.
    pub loss_kind: SoftLoss,
    pub gt_coeff: f64,
    pub batch_size: usize,
    pub min_crop: f32,
    pub flip: bool,
    /// Pool indices; empty means the whole pool.
    pub ensemble: Vec<usize>,
    /// Normalize with per-batch statistics instead of running statistics.
    pub batch_stats: bool,
    /// Stored crops per image; student epoch `e` replays view `e % views`.
    pub views: usize,
    pub seed: u64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            loss_kind: SoftLoss::Mse,
            gt_coeff: 0.1,
            batch_size: 50,
            min_crop: 0.25,
            flip: true,
            ensemble: Vec::new(),
            batch_stats: false,
            views: 1,
            seed: 0,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gt_coeff) {
            return Err(Error::invalid(format!("gt_coeff {} outside [0, 1]", self.gt_coeff)));
        }
        if self.batch_size == 0 || self.views == 0 {
            return Err(Error::invalid("relabel batch_size and views must be positive"));
        }
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::invalid(format!("relabel min_crop {} outside (0, 1]", self.min_crop)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabels {
    /// `[M * views, C]` probability rows; view `v` of image `i` is row
    /// `i * views + v`.
    pub targets: Tensor<f32>,
    /// Crop each row was generated under.
    pub crops: Vec<CropParams>,
    pub views: usize,
    pub loss_kind: SoftLoss,
    pub gt_coeff: f64,
    pub ensemble: Vec<String>,
}

fn softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let s: f32 = e.iter().sum();
    e.iter().map(|&v| v / s).collect()
}

/// Mean softmax over `ensemble` of each image under its crop, in chunks of
/// `batch_size`.
pub fn ensemble_probs(
    ensemble: &[&TeacherModel],
    images: &Tensor<f32>,
    crops: &[CropParams],
    batch_size: usize,
    batch_stats: bool,
) -> Result<Tensor<f32>> {
    let first = ensemble.first().ok_or(Error::Empty("relabel ensemble"))?;
    let s = images.shape();
    if s.len() != 4 || crops.len() != s[0] {
        return Err(Error::shape("ensemble_probs", format!("{} crops for images {s:?}", crops.len())));
    }
    if !images.all_finite() {
        return Err(Error::NonFinite("relabel input"));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let c = first.num_classes();
    let mode = if batch_stats { Mode::Train } else { Mode::Eval };
    let mut out = vec![0.0f32; n * c];
    let mut g = Graph::<f32>::new();
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        for t in ensemble {
            g.reset();
            let x = g.constant(images.select_rows(&idx));
            let x = g.crop_resize(x, &crops[start..start + idx.len()], h, w)?;
            let bound = t.bind(&mut g, false);
            let o = t.forward(&mut g, &bound, x, mode)?;
            let logits = g.value(o.logits);
            for (row, &i) in idx.iter().enumerate() {
                let p = softmax_row(logits.row(row));
                out[i * c..(i + 1) * c].iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
        }
    }
    let k = ensemble.len() as f32;
    out.iter_mut().for_each(|v| *v /= k);
    Tensor::new(vec![n, c], out)
}

/// `(p + gamma * onehot(y)) / (1 + gamma)`, then renormalized.
pub fn mix_ground_truth(probs: &Tensor<f32>, labels: &[usize], gamma: f64) -> Result<Tensor<f32>> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("mix_ground_truth", format!("{s:?} for {} labels", labels.len())));
    }
    let c = s[1];
    let mut out = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row: Vec<f64> = probs
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &p)| (p as f64 + if j == y { gamma } else { 0.0 }) / (1.0 + gamma))
            .collect();
        let sum: f64 = row.iter().sum();
        out.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o = (v / sum) as f32);
    }
    Ok(out)
}

/// Draws `cfg.views` relabel crops per image, from a per-image stream.
pub fn relabel_crops(cfg: &RelabelConfig, n: usize, h: usize, w: usize) -> Vec<CropParams> {
    (0..n)
        .flat_map(|i| {
            let mut r = rng::stream(cfg.seed, Domain::Relabel, &[i as u64]);
            (0..cfg.views)
                .map(|_| sample_crop(&mut r, h, w, (cfg.min_crop, 1.0), if cfg.flip { 0.5 } else { 0.0 }))
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn relabel_dataset(synth: &SyntheticDataset, cfg: &RelabelConfig, pool: &TeacherPool) -> Result<SoftLabels> {
    cfg.validate()?;
    let ids: Vec<usize> = if cfg.ensemble.is_empty() {
        (0..pool.len()).collect()
    } else {
        cfg.ensemble.clone()
    };
    let ensemble = ids
        .iter()
        .map(|&i| pool.get(i).ok_or_else(|| Error::invalid(format!("ensemble member {i} not in pool"))))
        .collect::<Result<Vec<_>>>()?;
    let s = synth.images.shape();
    let crops = relabel_crops(cfg, s[0], s[2], s[3]);
    let rows: Vec<usize> = (0..s[0] * cfg.views).map(|r| r / cfg.views).collect();
    let images = if cfg.views == 1 { synth.images.clone() } else { synth.images.select_rows(&rows) };
    let probs = ensemble_probs(&ensemble, &images, &crops, cfg.batch_size, cfg.batch_stats)?;
    let labels = synth.labels_usize();
    let targets = mix_ground_truth(&probs, &rows.iter().map(|&i| labels[i]).collect::<Vec<_>>(), cfg.gt_coeff)?;
    Ok(SoftLabels {
        targets,
        crops,
        views: cfg.views,
        loss_kind: cfg.loss_kind,
        gt_coeff: cfg.gt_coeff,
        ensemble: ensemble.iter().map(|t| t.name().to_string()).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct LabelSidecar {
    #[serde(default = "one")]
    views: usize,
    loss_kind: SoftLoss,
    gt_coeff: f64,
    ensemble: Vec<String>,
    crops: Vec<CropParams>,
}

fn one() -> usize {
    1
}

pub fn crops_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".crops.json");
    path.with_file_name(name)
}

impl SoftLabels {
    pub fn validate(&self) -> Result<()> {
        let s = self.targets.shape();
        if s.len() != 2 || self.crops.len() != s[0] || self.views == 0 || s[0] % self.views != 0 {
            return Err(Error::shape(
                "soft labels",
                format!("{s:?} with {} crops and {} views", self.crops.len(), self.views),
            ));
        }
        for i in 0..s[0] {
            let row = self.targets.row(i);
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("soft-label row {i} is not a distribution")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.targets.shape();
        let mut w = ByteWriter::default();
        w.bytes(LABEL_MAGIC);
        w.u32(LABEL_VERSION);
        w.u32(s[0] as u32);
        w.u32(s[1] as u32);
        w.f32s(self.targets.data());
        w.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, &self.to_bytes())?;
        let side = LabelSidecar {
            views: self.views,
            loss_kind: self.loss_kind,
            gt_coeff: self.gt_coeff,
            ensemble: self.ensemble.clone(),
            crops: self.crops.clone(),
        };
        write_atomic(&crops_path(path), &serde_json::to_vec_pretty(&side)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(LABEL_MAGIC)?;
        r.version(LABEL_VERSION)?;
        let m = r.u32()? as usize;
        let c = r.u32()? as usize;
        let targets = Tensor::new(vec![m, c], r.f32s(m * c)?)?;
        if r.remaining() != 0 {
            return Err(r.format_err(format!("{} trailing bytes", r.remaining())));
        }
        let side: LabelSidecar = serde_json::from_slice(&std::fs::read(crops_path(path))?)?;
        let labels = Self {
            targets,
            crops: side.crops,
            views: side.views,
            loss_kind: side.loss_kind,
            gt_coeff: side.gt_coeff,
            ensemble: side.ensemble,
        };
        labels.validate()?;
        Ok(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_uniform_rows() {
        let probs = Tensor::full(&[2, 10], 0.1f32);
        let mixed = mix_ground_truth(&probs, &[3, 0], 0.1).unwrap();
        assert!((mixed.row(0)[3] - 0.2 / 1.1).abs() < 1e-6);
        assert!((mixed.row(0)[0] - 0.1 / 1.1).abs() < 1e-6);
        assert!((mixed.row(1)[0] - 0.181_818).abs() < 1e-5);
        assert!((mixed.row(1)[9] - 0.090_909).abs() < 1e-5);
        assert_eq!(mix_ground_truth(&probs, &[3, 0], 0.0).unwrap(), probs);
        assert!(matches!(
            mix_ground_truth(&probs, &[10, 0], 0.1),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_ensemble_is_an_error() {
        let images = Tensor::zeros(&[1, 3, 8, 8]);
        let crops = [CropParams::identity(8, 8)];
        assert!(matches!(
            ensemble_probs(&[], &images, &crops, 4, false),
            Err(Error::Empty(_))
        ));
    }
}
