use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("no points")]
    NoPoints,

    #[error("no ground points")]
    NoGround,

    #[error("no object returns")]
    NoObjects,

    #[error("no usable priors")]
    NoPriors,

    #[error("raster geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("marker at cell ({row}, {col}) has zero height")]
    ZeroHeightMarker { row: usize, col: usize },

    #[error("rank {rank} < component {component}")]
    RankDeficient { rank: usize, component: usize },

    #[error("indivisible: thresholding left every vertex on one side")]
    Indivisible,

    #[error("eigensolver did not converge after {matvecs} matrix products (max residual {max_residual:.3e})")]
    NonConvergence { matvecs: usize, max_residual: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
