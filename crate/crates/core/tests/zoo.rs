mod common;

use common::*;
use prism_core::dataset::generate_shapes;
use prism_core::layers::LayerSpec;
use prism_core::zoo::{
    checkpoint_bytes, extract_bn_stats, load_checkpoint, parse_checkpoint, save_checkpoint, train_teacher, ArchSpec,
    SqueezeConfig, TeacherModel, TeacherPool, FAMILIES,
};
use prism_core::Error;
use std::path::Path;

#[test]
fn every_family_builds_and_validates() {
    for fam in FAMILIES {
        let a = ArchSpec::family(fam, 10, 32).unwrap();
        assert!(a.bn_count() > 0);
        let m = TeacherModel::init(a, 0).unwrap();
        assert_eq!(m.bn_stats.len(), m.arch.bn_count());
        assert!(m.bn_stats.iter().all(|s| s.mean.iter().all(|&v| v == 0.0) && s.var.iter().all(|&v| v == 1.0)));
    }
    assert!(ArchSpec::family("resnet-9000", 10, 32).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny_teacher("tiny", 5, 8, 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ckpt");
    save_checkpoint(&m, &p).unwrap();
    assert_eq!(load_checkpoint(&p).unwrap(), m);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let m = tiny_teacher("tiny", 5, 8, 3);
    let bytes = checkpoint_bytes(&m).unwrap();
    let p = Path::new("t.ckpt");
    for pos in [40, bytes.len() / 2, bytes.len() - 6] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(parse_checkpoint(&bad, p).is_err(), "flip at {pos}");
    }
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x01;
    assert!(matches!(parse_checkpoint(&bad, p), Err(Error::Checksum { .. })));
    assert!(parse_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
    assert!(matches!(parse_checkpoint(b"NOTACKPT", p), Err(Error::Format { .. })));
}

#[test]
fn newer_checkpoint_version_is_refused() {
    let m = tiny_teacher("tiny", 5, 8, 3);
    let mut bytes = checkpoint_bytes(&m).unwrap();
    bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        parse_checkpoint(&bytes, Path::new("t.ckpt")),
        Err(Error::Version { found: 2, .. })
    ));
}

#[test]
fn running_stats_track_standardized_input() {
    let real = generate_shapes(4, 60, 8, 5).unwrap();
    let arch = ArchSpec {
        name: "bn-first".into(),
        layers: vec![
            LayerSpec::bn(3),
            LayerSpec::conv(3, 8, 3, 2),
            LayerSpec::bn(8),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { inp: 8, out: 4 },
        ],
        feature_dim: 8,
        num_classes: 4,
        input: [3, 8, 8],
    };
    let cfg = SqueezeConfig {
        epochs: 4,
        batch_size: 24,
        ..Default::default()
    };
    let m = train_teacher(arch, &real, &cfg, 0).unwrap();
    let stats = extract_bn_stats(&m).unwrap();
    for c in 0..3 {
        assert!(stats[0].mean[c].abs() < 0.15, "mean {:?}", stats[0].mean);
        assert!((stats[0].var[c] - 1.0).abs() < 0.2, "var {:?}", stats[0].var);
    }
}

#[test]
fn bn_free_model_has_no_statistics() {
    let mut m = tiny_teacher("tiny", 5, 8, 3);
    m.bn_stats.clear();
    assert!(extract_bn_stats(&m).is_err());
    let arch = ArchSpec {
        name: "no-bn".into(),
        layers: vec![LayerSpec::GlobalAvgPool, LayerSpec::Linear { inp: 3, out: 2 }],
        feature_dim: 3,
        num_classes: 2,
        input: [3, 4, 4],
    };
    assert!(TeacherModel::init(arch, 0).is_err());
}

#[test]
fn one_epoch_beats_chance() {
    let real = generate_shapes(10, 200, 16, 0).unwrap();
    let cfg = SqueezeConfig {
        epochs: 1,
        batch_size: 32,
        lr: 0.02,
        ..Default::default()
    };
    let m = train_teacher(ArchSpec::family("convnet-deep", 10, 16).unwrap(), &real, &cfg, 0).unwrap();
    assert!(m.train_accuracy > 0.2, "{}", m.train_accuracy);
}

#[test]
fn pool_rules() {
    let a = tiny_teacher("a", 5, 8, 1);
    let b = tiny_teacher("b", 5, 8, 2);
    assert!(TeacherPool::new(vec![a.clone(), a.clone()], 1, true).is_err());
    assert!(TeacherPool::new(vec![a.clone(), a.clone()], 1, false).is_ok());
    assert!(TeacherPool::new(vec![a.clone(), b.clone()], 3, true).is_err());
    assert!(TeacherPool::new(vec![], 1, true).is_err());
    let other = tiny_teacher("c", 4, 8, 3);
    assert!(TeacherPool::new(vec![a.clone(), other], 1, true).is_err());
    let p = TeacherPool::new(vec![a, b], 2, true).unwrap();
    assert_eq!(p.primary().name(), "a");
    assert!(p.with_k_max(3).is_err());
}
