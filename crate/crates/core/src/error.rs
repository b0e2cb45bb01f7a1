use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

use crate::ingest::Channel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unparsable row at line {0}")]
    UnparsableRow(usize),
    #[error("invalid value in column `{column}` at line {line}")]
    InvalidValue { line: usize, column: String },
    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),
    #[error("file contains no data rows")]
    EmptyFile,
    #[error("series too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("channel {0} has zero variance")]
    ZeroVariance(Channel),
    #[error("non-positive price at index {0}")]
    NonPositivePrice(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("window {window} out of range for series of length {len}")]
    WindowOutOfRange { window: usize, len: usize },
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("component index {index} out of rank {rank}")]
    IndexOutOfRank { index: usize, rank: usize },

    #[error("insufficient extrema: {0}")]
    InsufficientExtrema(String),
    #[error("distributions have different supports")]
    SupportMismatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("actual value is zero at index {0}")]
    ZeroActual(usize),
    #[error("actual series has zero variance")]
    ZeroVarianceActual,

    #[error("matrix is singular or not positive definite")]
    SingularMatrix,
    #[error("unknown ticker `{0}`")]
    UnknownTicker(String),
    #[error("weights sum to {0:e}, cannot normalize")]
    DegenerateWeights(f64),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("test window too short: {days} days for holding {holding}")]
    InsufficientTestWindow { days: usize, holding: usize },
    #[error("empty universe")]
    EmptyUniverse,
    #[error("missing market cap for `{0}`")]
    MissingCap(String),
    #[error("zero volatility")]
    ZeroVolatility,
    #[error("strategy runs are misaligned")]
    MisalignedRuns,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Stage { source, .. } => source.kind(),
            InvalidParameter(_) => ErrorKind::Config,
            NoConvergence(_) | SingularMatrix | DivergedLoss { .. } | DegenerateWeights(_)
            | ZeroVolatility => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

/// Extension for tagging a result with the pipeline stage that produced it.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
