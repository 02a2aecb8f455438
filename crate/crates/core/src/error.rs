use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("record {id}: {kind}")]
    Record { id: String, kind: RecordError },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

/// Reasons a single dataset record can be rejected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("raster size mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("mask value {0} is not binary")]
    NonBinaryMask(u8),
    #[error("mask has no tumor pixels")]
    EmptyMask,
    #[error("tumor label {0} not in {{1, 2, 3}}")]
    BadLabel(u8),
    #[error("fold {0} not in 0..=4")]
    BadFold(u8),
    #[error("invalid extent {width}x{height}")]
    BadExtent { width: usize, height: usize },
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {index} has shape {found:?}, network expects {expected:?}")]
    TensorShape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
