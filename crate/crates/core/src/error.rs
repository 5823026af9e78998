use thiserror::Error;

use crate::symbols::SymbolKind;

/// Evaluation of a symbol outside its admissible argument range.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{symbol} is undefined at argument {argument}")]
pub struct DomainError {
    pub symbol: SymbolKind,
    pub argument: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid structure: {0}")]
    Structure(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("consistency check failed: {0}")]
    Consistency(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
