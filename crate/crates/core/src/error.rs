use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vector has zero variance")]
    ZeroVariance,

    #[error("all weights are zero")]
    AllWeightsZero,

    #[error("operation produced a non-finite value")]
    NonFinite,

    #[error("loss is not finite (training diverged)")]
    NonFiniteLoss,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("IDX file {path} is truncated")]
    TruncatedFile { path: PathBuf },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("index {index} out of range for dataset of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no client update was delivered this round")]
    NoDeliveredUpdates,

    #[error("merge group is empty")]
    EmptyGroup,

    #[error("merge plan does not match the client roster: {0}")]
    PlanMismatch(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("failed to load data: {0}")]
    DataLoadFailure(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { expected, actual }
    }

    /// Process exit code used by the CLI: 2 for configuration problems, 3 for
    /// data problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_) => 2,
            Error::DataLoadFailure(_)
            | Error::BadMagic { .. }
            | Error::TruncatedFile { .. }
            | Error::CountMismatch { .. }
            | Error::InfeasiblePartition(_) => 3,
            _ => 1,
        }
    }
}
