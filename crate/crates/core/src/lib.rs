//! Desk-scale multi-teacher dataset distillation.
//!
//! The crate is organised along the stages of the pipeline:
//!
//! * [`autodiff`], [`layers`], [`optim`], [`schedule`]: a small reverse-mode
//!   autodiff engine with the layer set needed by compact CNN teachers.
//! * [`zoo`]: architecture families, teacher training ("squeeze"), running
//!   batch-norm statistics and checkpoints.
//! * [`recovery`]: synthetic image optimization against a logit teacher and a
//!   sampled subset of batch-norm alignment teachers.
//! * [`relabel`]: ensemble soft labels with ground-truth mixing.
//! * [`student`]: student training and top-1 evaluation.
//! * [`diversity`]: intra-class cosine similarity of penultimate features.
//! * [`dataset`]: real dataset container, image-directory ingestion and a
//!   procedural toy generator.

pub mod augment;
pub mod autodiff;
pub mod dataset;
pub mod diversity;
pub mod error;
pub mod io;
pub mod layers;
pub mod optim;
pub mod recovery;
pub mod relabel;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod student;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub use dataset::{RealDataset, Split};
pub use diversity::{DiversityReport, FeatureMatrix};
pub use recovery::{RecoveryConfig, SyntheticDataset, TeacherAssignment};
pub use relabel::{RelabelConfig, SoftLabels};
pub use student::{EvalReport, ValidationConfig};
pub use zoo::{ArchSpec, TeacherModel, TeacherPool};
