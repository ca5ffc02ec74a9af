use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("voxel {0} is not in the active mask")]
    InactiveVoxel(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("design matrix is singular (condition number {condition:.3e}); offending columns {columns:?}")]
    SingularDesign { condition: f64, columns: Vec<usize> },

    #[error("every GCV candidate bandwidth was disqualified (tr(S) >= N_D)")]
    AllCandidatesDisqualified,

    #[error("zero total weight at voxel rank {0}")]
    ZeroWeight(usize),

    #[error("hypothesis matrix is not of full row rank")]
    RankDeficientHypothesis,

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: truncated payload at byte offset {offset} (expected {expected} bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
    },

    #[error("{path}: non-finite value at voxel {index}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("{other} does not match {first}: {detail}")]
    GridMismatch {
        first: PathBuf,
        other: PathBuf,
        detail: String,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
