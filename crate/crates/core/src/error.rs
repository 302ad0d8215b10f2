use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("episode error: {0}")]
    Episode(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("deadlock detected: {0}")]
    Deadlock(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures caused by non-finite or diverging numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Training(_))
    }
}
