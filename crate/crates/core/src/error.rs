use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An exponent argument left the representable range or a term went non-finite.
    #[error("evaluation of the {term} term failed at n={n:e}, d={d:e}: {reason}")]
    Evaluation {
        term: &'static str,
        n: f64,
        d: f64,
        reason: String,
    },

    #[error("singular regression: {0}")]
    Singular(String),

    #[error("transform {transform} is undefined at {value}")]
    TransformDomain { transform: String, value: f64 },

    #[error("no feasible transform pair")]
    NoFeasibleTransform,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-positive averaged residual G(N)={value} at n={n:e}; the data-term fit is inconsistent with the grid")]
    ResidualSign { n: f64, value: f64 },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("line {line}, column {column}: {message}")]
    Parse { line: u64, column: u64, message: String },

    #[error("line {line}: {message}")]
    InvalidRow { line: u64, message: String },

    #[error("law file: {0}")]
    LawFile(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
