use std::path::PathBuf;

use thiserror::Error;

use crate::comms::CodecError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty chain: model has no joints")]
    EmptyChain,

    #[error("zero-length segment {index}")]
    ZeroLengthSegment { index: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("stale neighbor: no prediction for robot {robot}")]
    StaleNeighbor { robot: usize },

    #[error("horizon mismatch: expected {expected} steps, got {got}")]
    HorizonMismatch { expected: usize, got: usize },

    #[error("numerical failure in {stage} (iterate: {iterate:?})")]
    NumericalFailure { stage: &'static str, iterate: Vec<f64> },

    #[error("invalid pruning table: {0}")]
    InvalidPruning(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("empty cluster")]
    EmptyCluster,

    #[error("region too crowded: placed {placed} of {requested} objects")]
    RegionTooCrowded { placed: usize, requested: usize },

    #[error("empty log")]
    EmptyLog,

    #[error("ik failed: residual {residual:.3e} m after {iterations} iterations")]
    IkFailed { residual: f64, iterations: usize },

    #[error(transparent)]
    Codec(#[from] CodecError),

    #[error("transport error on {addr}: {source}")]
    Transport {
        addr: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
