use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] io::Error),

    /// Malformed container bytes (bad magic, unknown version or dtype, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// A record parsed fine but violates a domain invariant.
    #[error("validation error in `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Engine state contradicts itself (dangling ids and the like).
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Diverged { epoch: usize, what: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("memory bank exceeded cap of {cap} queries")]
    BankFull { cap: usize },

    /// An error raised while processing one frame of a sequence.
    #[error("frame {t}, stage `{stage}`: {source}")]
    Stage { t: u32, stage: &'static str, source: Box<Error> },
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation { field, reason: reason.into() }
    }

    /// Whether the error stems from invalid input rather than a broken engine.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Format(_) | Error::Validation { .. } | Error::Precondition(_) | Error::Config(_)
        )
    }

    pub(crate) fn at(self, t: u32, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { t, stage, source: Box::new(e) },
        }
    }

    pub fn is_consistency(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_consistency(),
            e => matches!(e, Error::Consistency(_)),
        }
    }
}
