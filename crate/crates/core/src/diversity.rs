//! Intra-class cosine similarity of classifier-input features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;
use crate::zoo::TeacherModel;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `[M, D]`.
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub extractor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSimilarity {
    pub class: usize,
    pub samples: usize,
    /// Mean cosine similarity over unordered pairs.
    pub mean: f64,
    /// Population standard deviation of the pair similarities.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub extractor: String,
    pub dataset: String,
    pub per_class: Vec<ClassSimilarity>,
    /// Classes with fewer than two samples.
    pub excluded: Vec<usize>,
    /// Mean of the per-class means.
    pub global_mean: f64,
}

/// Eval-mode classifier-input features, no augmentation.
pub fn extract_features(
    extractor: &TeacherModel,
    images: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<FeatureMatrix> {
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::shape("extract_features", "image and label counts differ"));
    }
    let (_, features) = extractor.infer(images, batch_size)?;
    Ok(FeatureMatrix {
        features,
        labels: labels.to_vec(),
        extractor: extractor.name().to_string(),
    })
}

/// Cosine similarity in 64-bit arithmetic; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn intra_class_cosine(fm: &FeatureMatrix, dataset: &str) -> Result<DiversityReport> {
    let m = fm.labels.len();
    if fm.features.ndim() != 2 || fm.features.shape()[0] != m {
        return Err(Error::shape("intra_class_cosine", format!("{:?} for {m} labels", fm.features.shape())));
    }
    if !fm.features.all_finite() {
        return Err(Error::NonFinite("feature matrix"));
    }
    let classes = fm.labels.iter().max().map_or(0, |&c| c + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &c) in fm.labels.iter().enumerate() {
        members[c].push(i);
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for (class, idx) in members.iter().enumerate() {
        if idx.len() < 2 {
            if !idx.is_empty() {
                excluded.push(class);
            }
            continue;
        }
        let mut sims = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                sims.push(cosine(fm.features.row(i), fm.features.row(j)));
            }
        }
        let n = sims.len() as f64;
        let mean = sims.iter().sum::<f64>() / n;
        let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        per_class.push(ClassSimilarity {
            class,
            samples: idx.len(),
            mean,
            std: var.sqrt(),
        });
    }
    if per_class.is_empty() {
        return Err(Error::invalid("no class has two or more samples"));
    }
    let global_mean = per_class.iter().map(|c| c.mean).sum::<f64>() / per_class.len() as f64;
    Ok(DiversityReport {
        extractor: fm.extractor.clone(),
        dataset: dataset.to_string(),
        per_class,
        excluded,
        global_mean,
    })
}

/// CSV with header `label,f_0,...,f_{D-1}`, one row per sample in order.
pub fn export_features(fm: &FeatureMatrix, path: &Path) -> Result<()> {
    let d = fm.features.shape().get(1).copied().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    for (i, &label) in fm.labels.iter().enumerate() {
        let mut rec = vec![label.to_string()];
        rec.extend(fm.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Parses a file written by [`export_features`].
pub fn import_features(path: &Path, extractor: &str) -> Result<FeatureMatrix> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len().saturating_sub(1);
    let (mut labels, mut data) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        labels.push(rec[0].parse::<usize>().map_err(|e| bad(e.to_string()))?);
        for f in rec.iter().skip(1) {
            data.push(f.parse::<f32>().map_err(|e| bad(e.to_string()))?);
        }
    }
    Ok(FeatureMatrix {
        features: Tensor::new(vec![labels.len(), d], data)?,
        labels,
        extractor: extractor.to_string(),
    })
}

impl DiversityReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    /// Plot-ready `class,mean,std` table.
    pub fn save_class_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "mean", "std"])?;
        for c in &self.per_class {
            w.write_record([c.class.to_string(), c.mean.to_string(), c.std.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: Vec<Vec<f32>>, labels: Vec<usize>) -> FeatureMatrix {
        let d = rows[0].len();
        FeatureMatrix {
            features: Tensor::new(vec![rows.len(), d], rows.concat()).unwrap(),
            labels,
            extractor: "x".into(),
        }
    }

    #[test]
    fn identical_and_orthogonal_rows() {
        let r = intra_class_cosine(&fm(vec![vec![1.0, 2.0]; 3], vec![0, 0, 0]), "d").unwrap();
        assert!((r.per_class[0].mean - 1.0).abs() < 1e-12);
        let r = intra_class_cosine(&fm(vec![vec![1.0, 0.0], vec![0.0, 3.0]], vec![0, 0]), "d").unwrap();
        assert_eq!(r.per_class[0].mean, 0.0);
    }

    #[test]
    fn zero_vectors_and_singletons() {
        let r = intra_class_cosine(
            &fm(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![5.0, 1.0]], vec![0, 0, 0, 1]),
            "d",
        )
        .unwrap();
        // pairs: (0,1)=0, (0,2)=0, (1,2)=1
        assert!((r.per_class[0].mean - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.excluded, vec![1]);
    }
}
