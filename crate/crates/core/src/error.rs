use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {op} at token {index}")]
    Numeric { op: &'static str, index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("importance aggregation needs at least one participating layer")]
    EmptyLayerSet,

    #[error("selection mismatch: {0}")]
    SelectionMismatch(String),

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding a weight file.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic {found:?}, expected \"MSCP\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated weight file at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },

    #[error("tensor name at byte offset {offset} is not valid UTF-8")]
    BadName { offset: usize },

    #[error("duplicate tensor name {0:?}")]
    Duplicate(String),

    #[error("unknown tensors in weight file: {0:?}")]
    Unknown(Vec<String>),

    #[error("missing tensors in weight file: {0:?}")]
    Missing(Vec<String>),

    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    WrongShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
