use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate range: tensor has no non-zero values to calibrate against")]
    DegenerateRange,

    #[error("negative batchnorm variance {value} at channel {channel}")]
    NegativeVariance { channel: usize, value: f64 },

    #[error("weights blob byte count mismatch: expected {expected} bytes, found {actual}")]
    ByteCount { expected: u64, actual: u64 },

    #[error("weights blob checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("unsupported schema version {found} (supported: {supported})")]
    UnsupportedSchema { found: u32, supported: u32 },

    #[error("inconsistent model: {0}")]
    Consistency(String),

    #[error("bad calibration file: {0}")]
    CalibrationFormat(String),

    #[error("insufficient calibration samples: requested {requested}, available {available}")]
    InsufficientSamples { requested: usize, available: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("scheme mask has length {actual}, expected {expected} (one per adjacent module pair)")]
    MaskLength { expected: usize, actual: usize },

    #[error("capacity metric `loss` requires per-module losses from a baseline reconstruction report")]
    MissingReports,

    #[error("reconstruction diverged in module {module} (layers {start}..{end}) at iteration {iter}")]
    Divergence {
        module: usize,
        start: usize,
        end: usize,
        iter: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidLayer(_) => "invalid_layer",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateRange => "degenerate_range",
            Error::NegativeVariance { .. } => "negative_variance",
            Error::ByteCount { .. } => "byte_count",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::UnsupportedSchema { .. } => "unsupported_schema",
            Error::Consistency(_) => "consistency",
            Error::CalibrationFormat(_) => "calibration_format",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::OutOfRange(_) => "out_of_range",
            Error::MaskLength { .. } => "mask_length",
            Error::MissingReports => "missing_reports",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
