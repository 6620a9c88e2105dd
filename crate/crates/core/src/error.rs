use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("shape mismatch for `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("non-finite value in `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("malformed permutation file, line {line}: {detail}")]
    MalformedPermutationFile { line: usize, detail: String },

    #[error("duplicate index {index} in permutation of length {len}")]
    DuplicateIndex { index: usize, len: usize },

    #[error("index {index} out of range for permutation of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown permutation variable `{0}`")]
    UnknownVariable(String),

    #[error("assignment is missing variable `{0}`")]
    IncompleteAssignment(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("non-finite activation in block {block}")]
    NonFiniteActivation { block: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

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

    pub(crate) fn shape(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            name: name.into(),
            detail: detail.into(),
        }
    }
}
