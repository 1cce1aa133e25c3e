use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's precondition (wrong objective kind,
    /// gradient-free sample, non-scalar cost, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("node `{0}` is already registered")]
    Registration(String),

    #[error("unknown node `{name}` (known: {known:?})")]
    Lookup { name: String, known: Vec<String> },

    #[error("update error on parameter `{0}`: non-finite gradient")]
    Update(String),

    #[error("sampler state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
