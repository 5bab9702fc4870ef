use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Core(#[from] qfpme_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config { field: field.to_string(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        use qfpme_core::Error as E;
        match self {
            CliError::Config { .. } => EXIT_VALIDATION,
            CliError::Core(e) if e.is_non_convergence() => EXIT_NON_CONVERGENCE,
            CliError::Core(
                E::InvalidParameter { .. }
                | E::DimensionMismatch { .. }
                | E::NotHermitian { .. }
                | E::StepTooLarge { .. }
                | E::ModelMismatch(_)
                | E::OrderOutOfRange { .. },
            ) => EXIT_VALIDATION,
            _ => EXIT_FAILURE,
        }
    }
}
