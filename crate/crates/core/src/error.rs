use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the fusion toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("architecture incompatible: {0}")]
    ArchIncompatible(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("pruning would empty layer {layer}")]
    EmptyLayer { layer: usize },

    #[error("bad magic number in {0}")]
    BadMagic(String),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("unsupported checkpoint version {0:#04x}")]
    VersionUnsupported(u8),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },

    #[error("checkpoint arch_id {stored} does not match recomputed {computed}")]
    ArchIdMismatch { stored: String, computed: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
