//! Stage orchestration for the `cfaudit` command.
//!
//! Every stage reads artifacts written by its predecessors from the run
//! directory and writes its own outputs plus a `<stage>.manifest.json`
//! recording input/output digests and the effective configuration.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{Config, Effective, Overrides};
pub use pipeline::{run_all, run_stage, Ctx, Stage, StageOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("missing {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("generation incomplete: {0}")]
    PartialBatch(String),
    #[error("{context}: {message}")]
    Failed { context: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::MissingArtifact { .. } => 2,
            CliError::PartialBatch(_) => 3,
            CliError::Failed { .. } => 1,
        }
    }

    pub(crate) fn failed(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        CliError::Failed {
            context: context.into(),
            message: err.to_string(),
        }
    }
}
