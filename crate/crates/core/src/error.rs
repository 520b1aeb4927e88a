use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("unsupported norm for {op}: {norm}")]
    UnsupportedNorm { op: &'static str, norm: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// True for failures caused by numerics (NaN/Inf, divergence) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}

/// Dataset decoding failures. Each malformed-file condition has its own variant.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad IDX magic 0x{found:08x}")]
    BadMagic { path: PathBuf, found: u32 },

    #[error("{path}: IDX header declares no dimensions")]
    EmptyDims { path: PathBuf },

    #[error("{path}: IDX dimensions overflow the addressable size")]
    DimOverflow { path: PathBuf },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("{path}: trailing bytes after payload ({extra})")]
    TrailingBytes { path: PathBuf, extra: usize },

    #[error("{path}: CIFAR binary size {len} is not a positive multiple of 3073")]
    CifarSize { path: PathBuf, len: usize },

    #[error("{path}: label {label} out of range for {classes} classes")]
    LabelRange { path: PathBuf, label: usize, classes: usize },

    #[error("{0}")]
    Mismatch(String),

    #[error("dataset file not found: {0}")]
    Missing(PathBuf),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
}
