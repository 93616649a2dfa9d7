//! Real datasets: the `PRSMDATA` container, per-class image directories and a
//! procedural shape/texture generator for desk-scale runs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::DataContainer;
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Val = 1,
}

impl Split {
    /// Deterministic 90/10 held-out assignment from a stable image id.
    pub fn for_id(id: u64) -> Self {
        if rng::stream_seed(id, Domain::Dataset, &[0x5b17]) % 10 == 0 {
            Split::Val
        } else {
            Split::Train
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            _ => None,
        }
    }
}

/// Normalized images with labels, split tags and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RealDataset {
    /// `[N, C, H, W]`, normalized per channel.
    pub images: Tensor<f32>,
    pub labels: Vec<u16>,
    pub split: Vec<Split>,
    pub ids: Vec<u64>,
    pub num_classes: usize,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl RealDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.shape().first().copied().unwrap_or(0);
        if self.images.ndim() != 4 {
            return Err(Error::shape("dataset", format!("{:?}", self.images.shape())));
        }
        if n != self.labels.len() || n != self.split.len() || n != self.ids.len() {
            return Err(Error::shape("dataset", "labels/split/ids length differs from N"));
        }
        let c = self.images.shape()[1];
        if self.norm_mean.len() != c || self.norm_std.len() != c {
            return Err(Error::shape("dataset", "normalization constants per channel"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: self.num_classes,
            });
        }
        let present: BTreeSet<u16> = self.labels.iter().copied().collect();
        if let Some(missing) = (0..self.num_classes as u16).find(|c| !present.contains(c)) {
            return Err(Error::MissingClass(missing.to_string()));
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Indices of `split` grouped by class, in dataset order.
    pub fn class_indices(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for i in self.indices(split) {
            out[self.labels[i] as usize].push(i);
        }
        out
    }

    pub fn labels_usize(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// Normalized values of raw pixel 0 and 1 per channel.
    pub fn pixel_bounds(&self) -> Vec<(f32, f32)> {
        pixel_bounds(&self.norm_mean, &self.norm_std)
    }

    pub fn to_container(&self) -> DataContainer {
        DataContainer {
            images: self.images.clone(),
            labels: self.labels.clone(),
            split: self.split.iter().map(|&s| s as u8).collect(),
            ids: self.ids.clone(),
            num_classes: self.num_classes as u32,
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
        }
    }

    pub fn from_container(c: DataContainer, path: &Path) -> Result<Self> {
        let split = c
            .split
            .iter()
            .map(|&s| {
                Split::from_u8(s).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("unknown split tag {s}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            images: c.images,
            labels: c.labels,
            split,
            ids: c.ids,
            num_classes: c.num_classes as usize,
            norm_mean: c.norm_mean,
            norm_std: c.norm_std,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Loads a `PRSMDATA` file, or a directory with one subdirectory of
    /// 8-bit RGB images per class.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            load_image_dir(path)
        } else {
            Self::from_container(DataContainer::read(path)?, path)
        }
    }
}

pub fn pixel_bounds(mean: &[f32], std: &[f32]) -> Vec<(f32, f32)> {
    mean.iter()
        .zip(std)
        .map(|(&m, &s)| ((0.0 - m) / s, (1.0 - m) / s))
        .collect()
}

fn path_id(rel: &str) -> u64 {
    let digest = Sha256::digest(rel.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Per-channel mean/std of `[N, C, H*W]` raw pixels, normalized in place.
fn normalize(raw: &mut [f32], c: usize, plane: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let count = (raw.len() / c) as f64;
    for (j, chunk) in raw.chunks(plane).enumerate() {
        let ch = j % c;
        for &v in chunk {
            mean[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / count) as f32).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, &m)| ((s / count - (m as f64) * (m as f64)).max(1e-8)).sqrt() as f32)
        .collect();
    for (j, chunk) in raw.chunks_mut(plane).enumerate() {
        let ch = j % c;
        chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) / std[ch]);
    }
    (mean, std)
}

/// Reads `root/<class>/<image>` with classes in sorted name order. Images are
/// ordered by relative path and ids derive from that path, so neither depends
/// on directory listing order.
pub fn load_image_dir(root: &Path) -> Result<RealDataset> {
    let mut classes: Vec<(String, PathBuf)> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            detail: "no class subdirectories".into(),
        });
    }

    let mut entries: Vec<(String, usize, PathBuf)> = Vec::new();
    for (ci, (name, dir)) in classes.iter().enumerate() {
        let before = entries.len();
        for e in std::fs::read_dir(dir)?.filter_map(|e| e.ok()) {
            let p = e.path();
            if p.is_file() {
                let file = e.file_name().to_string_lossy().into_owned();
                entries.push((format!("{name}/{file}"), ci, p));
            }
        }
        if entries.len() == before {
            return Err(Error::MissingClass(name.clone()));
        }
    }
    entries.sort();

    let mut dims = None;
    let mut raw = Vec::new();
    for (_, _, p) in &entries {
        let img = image::open(p)?.to_rgb8();
        let (w, h) = img.dimensions();
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(Error::Format {
                path: p.clone(),
                detail: format!("image is {w}x{h}, expected {}x{}", dims.unwrap().1, dims.unwrap().0),
            });
        }
        let plane = (h * w) as usize;
        let px = img.into_raw();
        for ch in 0..3 {
            raw.extend((0..plane).map(|i| px[i * 3 + ch] as f32 / 255.0));
        }
    }
    let (h, w) = dims.expect("at least one image");
    let (h, w) = (h as usize, w as usize);
    let (norm_mean, norm_std) = normalize(&mut raw, 3, h * w);
    let ids: Vec<u64> = entries.iter().map(|(rel, _, _)| path_id(rel)).collect();
    let ds = RealDataset {
        images: Tensor::new(vec![entries.len(), 3, h, w], raw)?,
        labels: entries.iter().map(|(_, c, _)| *c as u16).collect(),
        split: ids.iter().map(|&id| Split::for_id(id)).collect(),
        ids,
        num_classes: classes.len(),
        norm_mean,
        norm_std,
    };
    ds.validate()?;
    Ok(ds)
}

/// Number of classes the shape generator can draw.
pub const SHAPE_CLASSES: usize = 10;

/// Procedural 10-class shape/texture dataset. Foreground and background
/// colours are random, so class identity lives in geometry only.
pub fn generate_shapes(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<RealDataset> {
    if classes == 0 || classes > SHAPE_CLASSES {
        return Err(Error::invalid(format!("shape generator supports 1..={SHAPE_CLASSES} classes")));
    }
    if per_class == 0 || size < 8 {
        return Err(Error::invalid("need per_class >= 1 and size >= 8"));
    }
    let plane = size * size;
    let n = classes * per_class;
    let mut raw = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for c in 0..classes {
        for i in 0..per_class {
            let mut r = rng::stream(seed, Domain::Dataset, &[c as u64, i as u64]);
            raw.extend(draw_shape(&mut r, c, size));
            labels.push(c as u16);
            ids.push(path_id(&format!("shapes/{seed}/{c}/{i}")));
        }
    }
    let (norm_mean, norm_std) = normalize(&mut raw, 3, plane);
    let ds = RealDataset {
        images: Tensor::new(vec![n, 3, size, size], raw)?,
        labels,
        split: ids.iter().map(|&id| Split::for_id(id)).collect(),
        ids,
        num_classes: classes,
        norm_mean,
        norm_std,
    };
    ds.validate()?;
    Ok(ds)
}

fn random_colour<R: Rng>(r: &mut R) -> [f32; 3] {
    [r.random(), r.random(), r.random()]
}

fn draw_shape<R: Rng>(r: &mut R, class: usize, size: usize) -> Vec<f32> {
    let s = size as f32;
    let bg = random_colour(r);
    let mut fg = random_colour(r);
    while fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() < 0.6 {
        fg = random_colour(r);
    }
    let grad_dir: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let grad_amp: f32 = r.random_range(0.0..0.25);
    let radius = r.random_range(0.22..0.42) * s;
    let cx = r.random_range(radius * 0.8..s - radius * 0.8);
    let cy = r.random_range(radius * 0.8..s - radius * 0.8);
    let angle: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let outline = r.random_bool(0.35);
    let period = r.random_range(4.5..8.5f32);
    let phase = r.random_range(0.0..std::f32::consts::TAU);
    let jitter = r.random_range(-0.25..0.25f32);
    let noise = Normal::new(0.0f32, 0.06).unwrap();

    let (sa, ca) = angle.sin_cos();
    let tau = std::f32::consts::TAU;
    let inside = |x: f32, y: f32| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let u = dx * ca + dy * sa;
        let v = -dx * sa + dy * ca;
        let dist = (dx * dx + dy * dy).sqrt();
        let shape = |scale: f32| -> bool {
            let rr = radius * scale;
            match class {
                0 => dist < rr,
                1 => u.abs().max(v.abs()) < rr * 0.8,
                2 => {
                    // equilateral triangle via three half-planes
                    (0..3).all(|k| {
                        let a = angle + k as f32 * tau / 3.0;
                        dx * a.cos() + dy * a.sin() < rr * 0.5
                    })
                }
                3 => (u.abs() < rr * 0.28 && v.abs() < rr) || (v.abs() < rr * 0.28 && u.abs() < rr),
                _ => dist < rr && dist > rr * 0.55,
            }
        };
        if class <= 4 {
            if outline && class != 4 {
                shape(1.0) && !shape(0.7)
            } else {
                shape(1.0)
            }
        } else {
            let (sj, cj) = jitter.sin_cos();
            let xr = x * cj + y * sj;
            let yr = -x * sj + y * cj;
            match class {
                5 => (tau * yr / period + phase).sin() > 0.0,
                6 => (tau * xr / period + phase).sin() > 0.0,
                7 => (tau * (xr + yr) / (period * 1.414) + phase).sin() > 0.0,
                8 => ((tau * xr / period + phase).sin() > 0.0) ^ ((tau * yr / period).sin() > 0.0),
                _ => {
                    let fx = (xr / period + phase).rem_euclid(1.0) - 0.5;
                    let fy = (yr / period).rem_euclid(1.0) - 0.5;
                    fx * fx + fy * fy < 0.09
                }
            }
        }
    };

    let mut out = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let g = grad_amp * ((xf / s - 0.5) * grad_dir.cos() + (yf / s - 0.5) * grad_dir.sin());
            let on = inside(xf, yf);
            for ch in 0..3 {
                let base = if on { fg[ch] } else { bg[ch] + g };
                out[ch * size * size + y * size + x] = (base + noise.sample(r)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic_and_normalized() {
        let a = generate_shapes(10, 6, 16, 3).unwrap();
        let b = generate_shapes(10, 6, 16, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[60, 3, 16, 16]);
        let c = generate_shapes(10, 6, 16, 4).unwrap();
        assert_ne!(a.images, c.images);
        // normalized channel means near zero
        let plane = 256;
        let mut m = 0.0f64;
        for img in 0..60 {
            m += a.images.data()[img * 3 * plane..img * 3 * plane + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        assert!((m / (60.0 * plane as f64)).abs() < 1e-4);
    }

    #[test]
    fn heldout_split_is_roughly_ten_percent() {
        let ds = generate_shapes(10, 100, 8, 0).unwrap();
        let val = ds.indices(Split::Val).len();
        assert!((60..=140).contains(&val), "{val}");
    }

    #[test]
    fn container_round_trip_preserves_dataset() {
        let ds = generate_shapes(3, 4, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("real.prsm");
        ds.save(&p).unwrap();
        assert_eq!(RealDataset::load(&p).unwrap(), ds);
    }

    #[test]
    fn class_gap_is_reported() {
        let mut ds = generate_shapes(3, 4, 8, 1).unwrap();
        for l in ds.labels.iter_mut() {
            if *l == 1 {
                *l = 2;
            }
        }
        match ds.validate() {
            Err(Error::MissingClass(c)) => assert_eq!(c, "1"),
            other => panic!("{other:?}"),
        }
    }
}
