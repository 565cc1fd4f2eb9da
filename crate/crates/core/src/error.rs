use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// User-facing configuration problems: bad flags, missing manifest, empty dataset.
    #[error("configuration error: {0}")]
    Config(String),

    /// A sample on disk violates the dataset contract.
    #[error("malformed sample for patient '{patient}': {reason}")]
    MalformedSample { patient: String, reason: String },

    /// A phase does not hold enough frames for 4-per-phase sampling.
    #[error("insufficient frames in {phase} phase: have {have}, need {need}")]
    InsufficientFrames {
        phase: String,
        have: usize,
        need: usize,
    },

    /// An internal precondition was violated (shape mismatch, invalid scale, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The training loss became non-finite.
    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: u64, detail: String },

    /// Checkpoint file does not match the expected format or architecture.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: 1 for user/config errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
