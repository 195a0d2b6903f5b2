use thiserror::Error;

use crate::exact::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid action {action}: {reason}")]
    InvalidAction { action: usize, reason: String },
    #[error("state error: {0}")]
    State(String),
    #[error("invalid schedule: {0}")]
    Validation(Violation),
    #[error("data error: {0}")]
    Data(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] offld_autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
