//! Teacher architectures, the squeeze stage, checkpoints and teacher pools.

mod arch;
mod checkpoint;
mod model;
mod train;

pub use arch::{ArchSpec, FAMILIES};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use model::{argmax, extract_bn_stats, BnStat, StudentModel, TeacherModel, BN_MOMENTUM};
pub use train::{train_teacher, SqueezeConfig};
pub(crate) use train::{apply_gradients, train_crops};

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Teachers available to recovery; index 0 is the primary model.
#[derive(Clone, Debug)]
pub struct TeacherPool {
    teachers: Vec<Arc<TeacherModel>>,
    k_max: usize,
}

impl TeacherPool {
    /// In `diverse` mode every teacher must have a distinct architecture.
    pub fn new(teachers: Vec<TeacherModel>, k_max: usize, diverse: bool) -> Result<Self> {
        let first = teachers.first().ok_or(Error::Empty("teacher pool"))?;
        if k_max == 0 || k_max > teachers.len() {
            return Err(Error::invalid(format!(
                "k_max {k_max} outside 1..={} for this pool",
                teachers.len()
            )));
        }
        let (classes, input) = (first.arch.num_classes, first.arch.input);
        for t in &teachers {
            t.validate()?;
            if t.arch.num_classes != classes || t.arch.input[0] != input[0] {
                return Err(Error::invalid(format!(
                    "teacher {} disagrees with {} on classes or input channels",
                    t.name(),
                    first.name()
                )));
            }
        }
        if diverse {
            let mut seen = BTreeSet::new();
            if let Some(dup) = teachers.iter().find(|t| !seen.insert(t.name().to_string())) {
                return Err(Error::invalid(format!(
                    "diverse pool has architecture {} twice",
                    dup.name()
                )));
            }
        }
        Ok(Self {
            teachers: teachers.into_iter().map(Arc::new).collect(),
            k_max,
        })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn with_k_max(&self, k_max: usize) -> Result<Self> {
        if k_max == 0 || k_max > self.len() {
            return Err(Error::invalid(format!("k_max {k_max} outside 1..={}", self.len())));
        }
        Ok(Self {
            teachers: self.teachers.clone(),
            k_max,
        })
    }

    pub fn get(&self, id: usize) -> Option<&TeacherModel> {
        self.teachers.get(id).map(|t| t.as_ref())
    }

    pub fn teachers(&self) -> impl Iterator<Item = &TeacherModel> {
        self.teachers.iter().map(|t| t.as_ref())
    }

    pub fn primary(&self) -> &TeacherModel {
        &self.teachers[0]
    }

    pub fn num_classes(&self) -> usize {
        self.primary().num_classes()
    }
}
