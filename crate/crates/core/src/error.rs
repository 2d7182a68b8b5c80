use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not a distribution grid: {0}")]
    NotDistribution(String),

    #[error("unknown object {token:?} at bytes {start}..{end}")]
    UnknownObject {
        token: String,
        start: usize,
        end: usize,
    },

    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
