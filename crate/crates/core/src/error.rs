use thiserror::Error;

/// Errors raised across the library.
///
/// The variants map onto the command-line exit classes: configuration
/// problems, data problems and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate tree: {0}")]
    DegenerateTree(String),

    #[error("pair {pair_id} not routable: treated and control fall on opposite sides of the split on {covariate}")]
    PairNotRoutable { pair_id: String, covariate: String },

    #[error("incompatible null: {0}")]
    IncompatibleNull(String),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse classification used by the CLI for exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}
