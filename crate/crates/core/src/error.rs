use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("incompatible models: {0}")]
    Compatibility(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("checksum mismatch in {path}: expected {expected}, found {found}")]
    Integrity {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {0}; run the build command first")]
    MissingArtifact(PathBuf),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Process exit codes used by the command-line driver.
pub mod exit {
    pub const OK: i32 = 0;
    pub const STAGE_FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    /// An internal invariant or integrity check failed.
    pub const ARTIFACT_BUG: i32 = 3;
    /// All invariants held but the expected qualitative pattern did not appear.
    pub const PHENOMENON_ABSENT: i32 = 4;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => exit::USAGE,
            Error::Shape(_)
            | Error::Contract(_)
            | Error::Compatibility(_)
            | Error::Integrity { .. }
            | Error::Format { .. } => exit::ARTIFACT_BUG,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Training(_) | Error::MissingArtifact(_) | Error::Csv(_) | Error::Io(_) => {
                exit::STAGE_FAILURE
            }
        }
    }

    pub(crate) fn in_stage(stage: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |e| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
