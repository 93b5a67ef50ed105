use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("estimand undefined: {0}")]
    Undefined(String),
    #[error("computation too large: {0}")]
    Complexity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by bad input files or configuration, as opposed to
    /// failures during estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Data(_) | Error::Config(_) | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
