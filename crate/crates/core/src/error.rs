use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver failure at step {step}: {reason}")]
    SolverFailure { step: usize, reason: String },

    #[error("linear solver breakdown: {0}")]
    LinearSolver(String),

    #[error("degenerate local problem for {what}: {reason}")]
    DegenerateLocalProblem { what: String, reason: String },

    #[error("local problem did not converge after {steps} steps (last update {residual:.3e})")]
    NonConvergence { steps: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("missing artifact {path}; run `{subcommand}` first")]
    MissingArtifact { path: PathBuf, subcommand: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn format_err(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        reason: reason.into(),
    }
}
