use std::io;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension too small: {class_count} classes need at least {needed} dimensions, got {feature_dim}")]
    DimensionTooSmall {
        class_count: usize,
        feature_dim: usize,
        needed: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("version mismatch in {path}: {reason}")]
    VersionMismatch { path: String, reason: String },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("bad magic in {path}: {reason}")]
    BadMagic { path: String, reason: String },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("zero matrix: no column has nonzero norm")]
    ZeroMatrix,

    #[error("zero-norm column {0} in weight matrix")]
    ZeroColumn(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("single class in training data: {0}")]
    SingleClass(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("unknown strategy `{name}` for {family}; available: {available}")]
    UnknownStrategy {
        family: &'static str,
        name: String,
        available: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error: 1 for bad configuration or
    /// parameters, 2 for missing or mismatched artifacts, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::InvalidConfig(_)
            | Error::DimensionTooSmall { .. }
            | Error::UnknownStrategy { .. } => 1,
            Error::ShapeMismatch(_)
            | Error::MalformedFile { .. }
            | Error::VersionMismatch { .. }
            | Error::ArchitectureMismatch(_)
            | Error::MissingArtifact(_)
            | Error::BadMagic { .. }
            | Error::CountMismatch(_)
            | Error::EmptyInput(_)
            | Error::Io { .. } => 2,
            Error::ZeroMatrix
            | Error::ZeroColumn(_)
            | Error::NonFinite(_)
            | Error::Divergence { .. }
            | Error::SingleClass(_)
            | Error::NonConvergence(_)
            | Error::DegenerateCalibration(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
