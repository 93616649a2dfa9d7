use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::TeacherPool;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    /// One assignment per work unit, fixed for the whole optimization.
    Pre,
    /// A fresh assignment before every optimizer step.
    Intra,
}

/// How the BN subset relates to the logit teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// BN subset drawn independently of the logit teacher.
    Decoupled,
    /// BN subset is exactly the logit teacher.
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingRule {
    pub policy: SelectionPolicy,
    pub coupling: Coupling,
    /// Pin the logit teacher to the primary model and put it first in the
    /// BN subset.
    pub align_first: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TeacherAssignment {
    pub logit_teacher: usize,
    pub bn_subset: Vec<usize>,
    pub policy: SelectionPolicy,
    pub align_first: bool,
}

impl TeacherAssignment {
    pub fn validate(&self, pool_size: usize, k_max: usize) -> Result<()> {
        let k = self.bn_subset.len();
        if k == 0 || k > k_max {
            return Err(Error::invalid(format!("bn subset of size {k} with k_max {k_max}")));
        }
        if self.logit_teacher >= pool_size || self.bn_subset.iter().any(|&t| t >= pool_size) {
            return Err(Error::invalid(format!("teacher id outside pool of {pool_size}")));
        }
        let mut sorted = self.bn_subset.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != k {
            return Err(Error::invalid("bn subset repeats a teacher"));
        }
        if self.align_first && self.bn_subset[0] != self.logit_teacher {
            return Err(Error::invalid("align_first requires bn_subset[0] == logit_teacher"));
        }
        Ok(())
    }

    /// Logit teacher followed by BN teachers not already listed.
    pub fn distinct_teachers(&self) -> Vec<usize> {
        let mut out = vec![self.logit_teacher];
        for &t in &self.bn_subset {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of non-empty subsets of `k_total` teachers with at most `k_max`
/// members.
pub fn count_valid_subsets(k_total: usize, k_max: usize) -> Result<u128> {
    if k_max == 0 || k_max > k_total {
        return Err(Error::invalid(format!("k_max {k_max} outside 1..={k_total}")));
    }
    Ok((1..=k_max).map(|i| binomial(k_total, i)).sum())
}

/// Every valid subset as an ascending id list, ordered by size then
/// lexicographically.
pub fn enumerate_valid_subsets(k_total: usize, k_max: usize) -> Result<Vec<Vec<usize>>> {
    count_valid_subsets(k_total, k_max)?;
    let mut out = Vec::new();
    for size in 1..=k_max {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.clone());
            let Some(pos) = (0..size).rev().find(|&i| idx[i] != i + k_total - size) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    Ok(out)
}

/// Uniform draw over subsets of `items` with `min..=max` members, ascending.
fn uniform_subset<R: Rng + ?Sized>(rng: &mut R, items: &[usize], min: usize, max: usize) -> Vec<usize> {
    let n = items.len();
    let total: u128 = (min..=max).map(|i| binomial(n, i)).sum();
    let mut u = rng.random_range(0..total);
    let mut size = min;
    for i in min..=max {
        let c = binomial(n, i);
        if u < c {
            size = i;
            break;
        }
        u -= c;
    }
    let mut picked: Vec<usize> = sample(rng, n, size).into_iter().map(|i| items[i]).collect();
    picked.sort_unstable();
    picked
}

/// Draws a teacher assignment from the pool under `rule`.
pub fn sample_assignment<R: Rng + ?Sized>(pool: &TeacherPool, rule: &SamplingRule, rng: &mut R) -> Result<TeacherAssignment> {
    let k_total = pool.len();
    if k_total == 0 {
        return Err(Error::Empty("teacher pool"));
    }
    let k_max = pool.k_max();
    let logit_teacher = if rule.align_first {
        0
    } else {
        rng.random_range(0..k_total)
    };
    let bn_subset = match (rule.coupling, rule.align_first) {
        (Coupling::Coupled, _) => vec![logit_teacher],
        (Coupling::Decoupled, false) => {
            let all: Vec<usize> = (0..k_total).collect();
            uniform_subset(rng, &all, 1, k_max)
        }
        (Coupling::Decoupled, true) => {
            let others: Vec<usize> = (1..k_total).collect();
            let mut subset = vec![0];
            subset.extend(uniform_subset(rng, &others, 0, k_max - 1));
            subset
        }
    };
    Ok(TeacherAssignment {
        logit_teacher,
        bn_subset,
        policy: rule.policy,
        align_first: rule.align_first,
    })
}
