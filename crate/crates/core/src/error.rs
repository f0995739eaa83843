use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be >= 1 and the element count must fit in usize")]
    InvalidShape([usize; 4]),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: expected {expected} channels, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backward requires a scalar root, got {0}")]
    NonScalarRoot(Shape),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("image of {height}x{width} is too small for {what} (need at least {min}x{min})")]
    ImageTooSmall {
        what: &'static str,
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("missing counterpart for pair id {id:?} under {dir}")]
    MissingCounterpart { id: String, dir: PathBuf },

    #[error("pair {id:?}: phone is {phone} but dslr is {dslr}")]
    PairSizeMismatch { id: String, phone: Shape, dslr: Shape },

    #[error("cannot decode image {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
