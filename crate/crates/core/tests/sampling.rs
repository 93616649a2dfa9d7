mod common;

use std::collections::BTreeMap;

use common::*;
use prism_core::recovery::{
    count_valid_subsets, enumerate_valid_subsets, sample_assignment, Coupling, SamplingRule, SelectionPolicy,
};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn rule(coupling: Coupling, align_first: bool) -> SamplingRule {
    SamplingRule {
        policy: SelectionPolicy::Pre,
        coupling,
        align_first,
    }
}

fn subset_counts(k_max: usize, draws: usize, seed: u64) -> BTreeMap<Vec<usize>, usize> {
    let pool = tiny_pool(4, k_max, 3, 4);
    let mut r = rng(seed);
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        let a = sample_assignment(&pool, &rule(Coupling::Decoupled, false), &mut r).unwrap();
        *counts.entry(a.bn_subset).or_insert(0) += 1;
    }
    counts
}

#[test]
fn subset_counts_by_k_max() {
    assert_eq!(count_valid_subsets(4, 4).unwrap(), 15);
    assert_eq!(count_valid_subsets(4, 2).unwrap(), 10);
    assert_eq!(count_valid_subsets(4, 1).unwrap(), 4);
    assert!(count_valid_subsets(4, 5).is_err());
    assert!(count_valid_subsets(4, 0).is_err());
    let all = enumerate_valid_subsets(4, 4).unwrap();
    assert_eq!(all.len(), 15);
    assert_eq!(all[0], vec![0]);
    assert_eq!(all[4], vec![0, 1]);
    assert_eq!(all[14], vec![0, 1, 2, 3]);
}

#[test]
fn draws_are_uniform_over_all_subsets() {
    let counts = subset_counts(4, 10_000, 11);
    let support: Vec<Vec<usize>> = counts.keys().cloned().collect();
    assert_eq!(support, {
        let mut s = enumerate_valid_subsets(4, 4).unwrap();
        s.sort();
        s
    });
    let expected = 10_000.0 / 15.0;
    let stat: f64 = counts.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(14.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat}, p {p}");
}

#[test]
fn k_max_two_support_is_exact() {
    let counts = subset_counts(2, 10_000, 12);
    let mut expected = enumerate_valid_subsets(4, 2).unwrap();
    expected.sort();
    assert_eq!(counts.keys().cloned().collect::<Vec<_>>(), expected);
}

#[test]
fn coupled_and_aligned_rules() {
    let pool = tiny_pool(4, 3, 3, 4);
    let mut r = rng(1);
    for _ in 0..200 {
        let a = sample_assignment(&pool, &rule(Coupling::Coupled, false), &mut r).unwrap();
        assert_eq!(a.bn_subset, vec![a.logit_teacher]);
        let a = sample_assignment(&pool, &rule(Coupling::Coupled, true), &mut r).unwrap();
        assert_eq!((a.logit_teacher, a.bn_subset), (0, vec![0]));
        let a = sample_assignment(&pool, &rule(Coupling::Decoupled, true), &mut r).unwrap();
        assert_eq!(a.logit_teacher, 0);
        assert_eq!(a.bn_subset[0], 0);
        assert!(a.bn_subset.len() <= 3);
    }
}

proptest! {
    #[test]
    fn sampled_assignments_are_valid(seed in 0u64..10_000, k_max in 1usize..=4, decoupled: bool, align: bool) {
        let pool = tiny_pool(4, k_max, 3, 4);
        let coupling = if decoupled { Coupling::Decoupled } else { Coupling::Coupled };
        let a = sample_assignment(&pool, &rule(coupling, align), &mut rng(seed)).unwrap();
        prop_assert!(a.validate(4, k_max).is_ok());
        prop_assert!(a.bn_subset.windows(2).all(|w| w[0] < w[1]) || align);
    }
}
