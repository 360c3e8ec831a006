use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{origin}:{line}: {msg}")]
    Parse { origin: String, line: usize, msg: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },

    #[error("{0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
}

impl Error {
    /// True for problems with user input, as opposed to failures at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::UnknownKey(_)
                | Error::BadValue { .. }
                | Error::Validation(_)
                | Error::Shape(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bad_value(key: &str, msg: impl Into<String>) -> Self {
        Error::BadValue {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}
