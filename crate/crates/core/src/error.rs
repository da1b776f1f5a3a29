use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Prefixes format errors with the file they came from.
    pub(crate) fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            Error::Format { kind, detail } => Error::Format {
                kind,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}
