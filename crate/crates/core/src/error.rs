use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a single-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph batch is inconsistent: {0}")]
    Batch(String),
    #[error("container format version {found} is not readable (supported major version {supported})")]
    Version { found: String, supported: u32 },
    #[error("container is truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("array `{name}`: shape {shape:?} does not match payload of {len} values")]
    PayloadShape {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("array `{0}` failed checksum verification")]
    Checksum(String),
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("duplicate array name `{0}`")]
    DuplicateName(String),
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
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
