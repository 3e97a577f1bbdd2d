use thiserror::Error;

/// Errors raised by the localization library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument violated its documented precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A point or value lies outside the domain of the model.
    #[error("domain error: {0}")]
    Domain(String),
    /// Rank deficiency or a fully deflated search space.
    #[error("degenerate problem: {0}")]
    Degenerate(String),
    /// A numerical routine could not produce a usable result.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
