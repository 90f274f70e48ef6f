use std::path::PathBuf;

use crate::embedding::VideoId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("text is empty or whitespace-only")]
    EmptyText,
    #[error("vector has zero (or non-finite) norm")]
    DegenerateVector,
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("token id {token} is outside vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    #[error("no embedding for video {0}")]
    MissingEmbedding(VideoId),
    #[error("input mask enables no inputs")]
    NoInputs,
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("all loss terms are disabled")]
    NoLossTerms,
    #[error("no description for video {0}")]
    MissingDescription(VideoId),
    #[error("description is empty after cleaning")]
    EmptyAfterCleaning,
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("synthetic dataset needs at least 4 videos, got {0}")]
    TooSmall(usize),
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    DivergedTraining {
        epoch: usize,
        step: usize,
        /// Parameters from the last step that produced a finite loss.
        last_finite: Box<crate::encoders::EncoderParams>,
    },
    #[error("duplicate id {0}")]
    DuplicateId(VideoId),
    #[error("index is empty")]
    EmptyIndex,
    #[error("no ground truth for query {0}")]
    MissingGroundTruth(VideoId),
    #[error("candidate subset for query {0} does not contain its target")]
    InvalidSubset(VideoId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command-line surface: 3 for runtime
    /// divergence, 2 for everything caused by bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DivergedTraining { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
