use thiserror::Error;

/// Errors raised by the lattice, training, decoding and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of its legal range (temperature, beam size, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data violates a shape or content invariant.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A loss or score evaluated to a non-finite value.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    /// Every candidate was pruned or dropped.
    #[error("empty result: {0}")]
    EmptyResult(String),

    /// An enumeration oracle was asked for more than it is allowed to produce.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// A JSON document failed to parse; `path` locates the offending field.
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    /// A numeric check (gradient check, invariant) failed.
    #[error("numeric invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 usage, 2 data error, 3 numeric-invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::InvalidInput(_)
            | Error::EmptyResult(_)
            | Error::SizeLimit(_)
            | Error::Parse { .. }
            | Error::Io { .. } => 2,
            Error::NonFiniteLoss(_) | Error::Invariant(_) => 3,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Deserializes `text` as JSON, reporting the field path of the first error.
pub(crate) fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}
