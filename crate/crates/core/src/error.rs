use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("operator is not hermitian (deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("ill-conditioned linear system (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("{what} did not converge: {detail}")]
    NonConvergence { what: String, detail: String },

    #[error("time step {dt:.3e} violates the stability bound; admissible dt = {admissible:.3e}")]
    StepTooLarge { dt: f64, admissible: f64 },

    #[error("trace of the conditional state collapsed to {trace:.3e}")]
    TraceCollapse { trace: f64 },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("order {n} outside basis range 0..={max}")]
    OrderOutOfRange { n: usize, max: usize },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { field: field.to_string(), reason: reason.into() }
    }

    pub fn is_non_convergence(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::IllConditioned { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
