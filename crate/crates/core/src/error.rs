use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DvrError>;

#[derive(Debug, Error)]
pub enum DvrError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A finite-difference probe produced a non-finite loss.
    #[error("loss is not finite at perturbed coordinate {index}")]
    EvaluationFailure { index: usize },

    #[error("non-finite value in {phase} phase, term `{term}`")]
    NumericFailure { phase: String, term: String },

    #[error("gradient check failed: term `{term}`, block `{block}`, relative error {rel_err:e}")]
    GradientMismatch {
        term: String,
        block: String,
        rel_err: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("incompatible shapes: {0}")]
    Incompatible(String),
}

impl DvrError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DvrError::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(phase: &str, term: &str) -> Self {
        DvrError::NumericFailure {
            phase: phase.to_string(),
            term: term.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DvrError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 0 success, 2 config/io, 3 numeric, 4 shape/compatibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            DvrError::NumericFailure { .. } | DvrError::EvaluationFailure { .. } | DvrError::GradientMismatch { .. } => 3,
            DvrError::Incompatible(_) | DvrError::InvalidArgument(_) => 4,
            _ => 2,
        }
    }
}
