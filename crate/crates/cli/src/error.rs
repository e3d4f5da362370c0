use eub_core::Error as CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Convergence(String),

    #[error("{0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::Convergence(_) => EXIT_CONVERGENCE,
            CliError::Config(_) => EXIT_CONFIG,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Domain { .. }
            | CoreError::DimensionMismatch { .. }
            | CoreError::InvalidRecord(_)
            | CoreError::SingularDesign
            | CoreError::DegenerateData(_) => CliError::Data(msg),
            CoreError::NonConvergence { .. }
            | CoreError::BootstrapFailure { .. }
            | CoreError::TooManyDropped { .. }
            | CoreError::ProbeOutOfRegion(_) => CliError::Convergence(msg),
            CoreError::InvalidParameter(_) => CliError::Config(msg),
        }
    }
}
