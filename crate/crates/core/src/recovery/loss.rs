use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BnCapture, Mode, NetOutput};
use crate::scalar::Scalar;
use crate::zoo::{TeacherModel, TeacherPool};

use super::TeacherAssignment;

/// `sum_l ||mean_l - mu_l||_2 + ||var_l - sigma2_l||_2` from captured batch
/// statistics.
pub fn bn_alignment_from_captures<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &TeacherModel,
    captures: &[BnCapture],
) -> Result<Var> {
    if teacher.bn_stats.is_empty() {
        return Err(Error::invalid(format!("teacher {} has no batch-norm statistics", teacher.name())));
    }
    if captures.len() != teacher.bn_stats.len() {
        return Err(Error::invalid(format!(
            "{} captures for {} batch-norm layers of {}",
            captures.len(),
            teacher.bn_stats.len(),
            teacher.name()
        )));
    }
    let mut total: Option<Var> = None;
    for (cap, stat) in captures.iter().zip(&teacher.bn_stats) {
        let mu: Vec<T> = stat.mean.iter().map(|&v| T::from_f64(v as f64)).collect();
        let var: Vec<T> = stat.var.iter().map(|&v| T::from_f64(v as f64)).collect();
        let dm = g.l2_distance(cap.mean, &mu)?;
        let dv = g.l2_distance(cap.var, &var)?;
        let layer = g.add(dm, dv)?;
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn check_batch<T: Scalar>(g: &Graph<T>, batch: Var) -> Result<()> {
    let n = g.shape(batch).first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::invalid(format!("bn alignment needs a batch of at least 2, got {n}")));
    }
    Ok(())
}

/// BN alignment of `batch` against one frozen teacher.
pub fn bn_alignment_loss<T: Scalar>(g: &mut Graph<T>, teacher: &TeacherModel, batch: Var) -> Result<Var> {
    check_batch(g, batch)?;
    let bound = teacher.bind(g, false);
    let out = teacher.forward(g, &bound, batch, Mode::StatCapture)?;
    bn_alignment_from_captures(g, teacher, &out.bn)
}

/// Graph nodes of the recovery objective for one batch.
pub struct Objective {
    pub logit: Var,
    /// One BN alignment term per entry of the assignment's BN subset.
    pub bn: Vec<Var>,
    /// `logit + lambda * sum(bn)`.
    pub total: Var,
}

/// Builds `CE(phi(x), y) + lambda * sum_{w in M_sub} R_BN^w(x)`, forwarding
/// each distinct teacher once.
pub fn prism_objective<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    labels: &[usize],
    assignment: &TeacherAssignment,
    pool: &TeacherPool,
    lambda: f64,
) -> Result<Objective> {
    assignment.validate(pool.len(), pool.k_max())?;
    check_batch(g, input)?;
    let mut outputs: BTreeMap<usize, NetOutput> = BTreeMap::new();
    for id in assignment.distinct_teachers() {
        let teacher = pool.get(id).expect("validated id");
        let mode = if assignment.bn_subset.contains(&id) {
            Mode::StatCapture
        } else {
            Mode::Eval
        };
        let bound = teacher.bind(g, false);
        outputs.insert(id, teacher.forward(g, &bound, input, mode)?);
    }
    let logit = g.cross_entropy(outputs[&assignment.logit_teacher].logits, labels)?;
    let mut bn = Vec::with_capacity(assignment.bn_subset.len());
    for &id in &assignment.bn_subset {
        let captures = outputs[&id].bn.clone();
        bn.push(bn_alignment_from_captures(g, pool.get(id).unwrap(), &captures)?);
    }
    let mut reg = bn[0];
    for &b in &bn[1..] {
        reg = g.add(reg, b)?;
    }
    let reg = g.scale(reg, T::from_f64(lambda))?;
    let total = g.add(logit, reg)?;
    Ok(Objective { logit, bn, total })
}
