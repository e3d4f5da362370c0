use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Argument outside the domain of a special function.
    #[error("domain error in {func}: argument {value}")]
    Domain { func: &'static str, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    /// The optimizer ran out of evaluations. Carries the best point seen.
    #[error("optimizer did not converge after {evals} evaluations (best value {best_value})")]
    NonConvergence {
        evals: usize,
        best_point: Vec<f64>,
        best_value: f64,
    },

    #[error("weighted design matrix is singular")]
    SingularDesign,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("bootstrap failed: {dropped} of {total} refits dropped")]
    BootstrapFailure { dropped: usize, total: usize },

    #[error("simulation failed: {dropped} of {total} replicates dropped")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("numerical derivative probe left the valid region at coordinate {0}")]
    ProbeOutOfRegion(usize),
}
