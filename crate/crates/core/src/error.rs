use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity reached an op boundary.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training or sampling diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed file, stream, or configuration content.
    #[error("format error: {0}")]
    Format(String),

    /// Entropy coding failure (truncated or corrupt stream, bad table).
    #[error("coding error: {0}")]
    Coding(String),

    /// Weights on the decoder side do not match the stream.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// Invalid configuration or argument.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    /// A lower-level error annotated with the pipeline stage it came from.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Strips stage annotations and returns the innermost error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Attaches a pipeline stage label to errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Stage {
            stage,
            source: Box::new(source),
        })
    }
}
