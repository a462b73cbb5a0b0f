use thiserror::Error;

/// Errors raised by scenario construction, simulation and evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A scenario config line could not be parsed.
    #[error("line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// A required config key is absent.
    #[error("missing required key `{0}`")]
    MissingKey(String),

    /// The scenario violates one or more of its invariants.
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A documented precondition of the operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// No generated control matched the target.
    #[error("empty relevant set: 0 of {generated} controls accepted")]
    EmptyRelevantSet { generated: u64 },

    /// A cell of a layered image model holds no samples.
    #[error("insufficient data resolution: no samples in cell {cell}")]
    InsufficientResolution { cell: String },

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
