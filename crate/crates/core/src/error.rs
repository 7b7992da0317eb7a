use thiserror::Error;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum HjError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("singular state: |x| = {norm:e} is below {threshold:e}")]
    SingularState { norm: f64, threshold: f64 },

    #[error("integrator `{integrator}` cannot be used with model `{model}`: {reason}")]
    IncompatibleIntegrator {
        integrator: String,
        model: String,
        reason: String,
    },

    #[error("non-finite state at time node {node}, particle {particle}")]
    NonFiniteState { node: usize, particle: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at iteration {iteration} of subinterval {interval}")]
    NonFiniteLoss { iteration: usize, interval: usize },

    #[error("activation `{0}` is not twice differentiable")]
    NotTwiceDifferentiable(String),

    #[error("reference solution has a pole at t = {0}")]
    Pole(f64),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    IoAt {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HjError {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        HjError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps an I/O error with the path it concerns.
    pub fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HjError + '_ {
        move |source| HjError::IoAt {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code for this error: 2 config/validation, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HjError::Io(_) | HjError::IoAt { .. } => 3,
            HjError::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 3,
            HjError::NonFiniteState { .. }
            | HjError::NonFiniteLoss { .. }
            | HjError::SingularState { .. }
            | HjError::Pole(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HjError>;
