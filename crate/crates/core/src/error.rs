use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shapes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The operation does not support the requested mode.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A schedule whose posterior variance is undefined.
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    /// Non-finite activation or loss.
    #[error("numeric fault in {layer}: {detail}")]
    NumericFault { layer: String, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (tensor blobs, manifests, checkpoints).
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Stable machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Unsupported(_) => "unsupported",
            Error::DegenerateSchedule(_) => "degenerate_schedule",
            Error::NumericFault { .. } => "numeric_fault",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unsupported(_) => 1,
            Error::NumericFault { .. } | Error::DegenerateSchedule(_) => 3,
            Error::Contract(_) | Error::Io { .. } | Error::Format { .. } => 2,
        }
    }
}
