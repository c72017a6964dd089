use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps `Configuration` to exit code 2 and `AssertionFailed` to
/// exit code 1; everything else is treated as a hard failure.
#[derive(Error, Debug)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged (non-finite parameters) at step {step}")]
    DivergedRun { step: usize },

    #[error("backward sampler diverged (non-finite state) at step {step}")]
    DivergedSample { step: usize },

    #[error("verification assertion failed: {0}")]
    AssertionFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }
    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Configuration(_) | Error::TomlParse(_) => 2,
            Error::AssertionFailed(_) => 1,
            _ => 1,
        }
    }
}
