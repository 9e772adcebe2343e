use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trace too short: {len} samples, need at least {needed}")]
    EmptyTrace { len: usize, needed: usize },

    #[error("unsupported sampling rate {got} Hz (expected {expected} Hz)")]
    SampleRate { got: f64, expected: f64 },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid artifact mask: {0}")]
    InvalidMask(String),

    #[error(
        "no usable overlap between EDA [{eda_start:.3}, {eda_end:.3}] and trajectory \
         [{traj_start:.3}, {traj_end:.3}] (need {min_overlap} s)"
    )]
    Sync {
        eda_start: f64,
        eda_end: f64,
        traj_start: f64,
        traj_end: f64,
        min_overlap: f64,
    },

    #[error("decomposition input error: {0}")]
    DecompositionInput(String),

    #[error("decomposition did not converge after {} iterations (last change {:.3e})", .trace.len(), .trace.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { trace: Vec<f64> },

    #[error("impulse response parameters out of bounds: {0}")]
    TauBounds(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("annotation records without a matching SCR: {}", .0.join("; "))]
    DanglingAnnotations(Vec<String>),

    #[error("coders share no annotated SCRs")]
    DisjointCoders,

    #[error("model specification: {0}")]
    ModelSpec(String),

    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    Collinear(Vec<String>),

    #[error("insufficient data for model: {0}")]
    InsufficientData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
