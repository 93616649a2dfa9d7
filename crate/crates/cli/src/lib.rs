//! Configuration, stage orchestration and reporting behind the `prism` binary.

pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use manifest::Manifest;
pub use stages::{DiversityInput, Pipeline, Stage, StageOutcome};
