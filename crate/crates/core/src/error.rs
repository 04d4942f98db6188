use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (length mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training failed for client {client} at round {round}, epoch {epoch}: {reason}")]
    Training {
        client: usize,
        round: usize,
        epoch: usize,
        reason: String,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// The config text could not be parsed; the message names the offending key.
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("data generation: {0}")]
    Data(String),

    #[error("fairness violation: {0}")]
    Fairness(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse(_) | Error::Contract(_) | Error::Data(_) => 1,
            Error::Numeric(_) | Error::Training { .. } => 2,
            Error::Fairness(_) => 3,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}

pub(crate) fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("{what}: length mismatch ({a} vs {b})")));
    }
    Ok(())
}
