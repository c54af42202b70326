use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// `Validation`/`Identification` exit with 2, `Io`/`Parse` with 3 and
/// `Numerical` with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data error: {0}")]
    Data(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("model is not identified: {0}")]
    Identification(String),

    #[error("numerical divergence: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Validation(_) | Error::Identification(_) | Error::Config(_) => {
                2
            }
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
