use std::path::PathBuf;

/// Everything that can go wrong inside the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error(
        "backward called on a value that is not attached to this graph's recorded computation"
    )]
    NotAttached,

    #[error("graph was released by a previous backward pass")]
    GraphReleased,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("missing class {0} in input")]
    MissingClass(u8),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint descriptor does not match architecture: {0}")]
    DescriptorMismatch(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("i/o error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
