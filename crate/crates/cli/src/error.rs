use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] prism_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("stage {stage} needs {needs}: run `prism {needs}` first")]
    MissingPrerequisite { stage: String, needs: String },
    #[error("artifact {path} does not match the hash recorded in its manifest")]
    HashMismatch { path: PathBuf },
    #[error("stage {stage}: {needs} artifacts were produced by a different configuration; rerun {needs} or use --force")]
    MixedProvenance { stage: String, needs: String },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Glob(#[from] glob::PatternError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
