mod common;

use common::*;
use prism_core::diversity::{cosine, export_features, extract_features, import_features, intra_class_cosine, FeatureMatrix};
use prism_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Every unordered same-class pair, averaged per class, then across classes.
fn brute_force(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut means = Vec::new();
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            continue;
        }
        let mut sims = Vec::new();
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                let (x, y) = (&rows[idx[a]], &rows[idx[b]]);
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                sims.push(dot / (nx * ny));
            }
        }
        means.push(sims.iter().sum::<f64>() / sims.len() as f64);
    }
    means.iter().sum::<f64>() / means.len() as f64
}

fn random_matrix(n: usize, d: usize, classes: usize, seed: u64) -> (FeatureMatrix, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let fm = FeatureMatrix {
        features: Tensor::new(vec![n, d], rows.concat()).unwrap(),
        labels,
        extractor: "x".into(),
    };
    let rows64 = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    (fm, rows64)
}

#[test]
fn matches_exhaustive_pairwise_oracle() {
    for seed in 0..5 {
        let (fm, rows) = random_matrix(40, 12, 4, seed);
        let got = intra_class_cosine(&fm, "t").unwrap().global_mean;
        let want = brute_force(&rows, &fm.labels);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn invariant_to_sample_order() {
    let (fm, _) = random_matrix(30, 8, 3, 9);
    let mut order: Vec<usize> = (0..30).collect();
    order.shuffle(&mut rng(1));
    let shuffled = FeatureMatrix {
        features: fm.features.select_rows(&order),
        labels: order.iter().map(|&i| fm.labels[i]).collect(),
        extractor: "x".into(),
    };
    let a = intra_class_cosine(&fm, "t").unwrap();
    let b = intra_class_cosine(&shuffled, "t").unwrap();
    assert!((a.global_mean - b.global_mean).abs() < 1e-12);
    for (x, y) in a.per_class.iter().zip(&b.per_class) {
        assert!((x.mean - y.mean).abs() < 1e-12);
    }
}

#[test]
fn singleton_classes_are_excluded() {
    let fm = FeatureMatrix {
        features: Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.1, 0.0, 1.0]).unwrap(),
        labels: vec![0, 0, 1],
        extractor: "x".into(),
    };
    let r = intra_class_cosine(&fm, "t").unwrap();
    assert_eq!(r.excluded, vec![1]);
    assert_eq!(r.per_class.len(), 1);
    assert!((r.global_mean - cosine(&[1.0, 0.0], &[1.0, 0.1])).abs() < 1e-12);
}

#[test]
fn csv_round_trip() {
    let (fm, _) = random_matrix(10, 5, 2, 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    export_features(&fm, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("label,f_0,f_1,f_2,f_3,f_4\n"));
    assert_eq!(import_features(&p, "x").unwrap(), fm);
}

#[test]
fn features_come_from_the_classifier_input() {
    let m = tiny_teacher("tiny", 3, 8, 1);
    let images = rand_tensor(&[4, 3, 8, 8], 2);
    let fm = extract_features(&m, &images, &[0, 1, 2, 0], 3).unwrap();
    assert_eq!(fm.features.shape(), &[4, m.arch.feature_dim]);
    assert!(extract_features(&m, &images, &[0, 1], 3).is_err());
}

proptest! {
    #[test]
    fn cosine_is_bounded_and_scale_free(a in prop::collection::vec(-5.0f32..5.0, 6), b in prop::collection::vec(-5.0f32..5.0, 6), k in 0.1f32..10.0) {
        let c = cosine(&a, &b);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        let scaled: Vec<f32> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine(&scaled, &b) - c).abs() < 1e-5);
    }
}
