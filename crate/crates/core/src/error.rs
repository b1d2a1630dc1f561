use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid value at `{path}`: {message}")]
    Invariant { path: String, message: String },

    #[error("series: {0}")]
    Series(String),

    #[error("network: {0}")]
    Network(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("invalid conic program: {0}")]
    InvalidProgram(String),

    #[error("backend capability: {0}")]
    Capability(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("solve ended with status {status}: {diagnostics}")]
    Solve {
        status: crate::conic::SolveStatus,
        diagnostics: String,
    },

    #[error("out of regime: {0}")]
    OutOfRegime(String),

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("robust feasibility violated: {0}")]
    RobustFeasibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invariant(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invariant { path: path.into(), message: message.into() }
    }
}
