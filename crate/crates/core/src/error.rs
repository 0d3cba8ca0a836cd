use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// `Invalid*` variants are input/validation failures (the CLI maps them to
/// exit code 1); the rest are runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left_name} has shape {left:?} but {right_name} has shape {right:?}")]
    DimensionMismatch {
        left_name: &'static str,
        left: Vec<usize>,
        right_name: &'static str,
        right: Vec<usize>,
    },

    #[error("payload size mismatch for {path}: header implies {expected} bytes, file has {actual} bytes")]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("invalid gradient scheme: {0}")]
    InvalidScheme(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown phantom preset `{name}`; available presets: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("requested {requested} directions but only {available} diffusion-weighted directions are available")]
    TooFewDirections { requested: usize, available: usize },

    #[error("index {index} out of range for scheme with {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("rank-deficient design matrix (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("degenerate patch: ground-truth parameter matrix is identically zero")]
    DegeneratePatch,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by bad inputs rather than by a computation
    /// going wrong.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Diverged { .. } | Error::NonFinite(_) | Error::RankDeficient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
