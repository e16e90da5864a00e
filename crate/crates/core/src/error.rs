use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid interval [{lo}, {hi}]: lower bound must be below upper bound")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("invalid grid step {step} for interval of width {width}")]
    InvalidGridStep { step: f64, width: f64 },

    #[error("singular normal equations on a grid of {points} points")]
    SingularNormalEquations { points: usize },

    #[error("function is not finite at x = {x}")]
    NonFiniteValue { x: f64 },

    #[error("prior covariance for latent {latent} (length scale {length_scale}) is not positive definite even with jitter {jitter}")]
    PriorNotPositiveDefinite { latent: usize, length_scale: f64, jitter: f64 },

    #[error("posterior precision is not positive definite (most negative pivot {pivot:e})")]
    PrecisionNotPositiveDefinite { pivot: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("MAP estimate did not converge after {iterations} Newton steps (gradient norm {grad_norm:e})")]
    MapNotConverged { iterations: usize, grad_norm: f64 },

    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: String },

    #[error("{path}: line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularNormalEquations { .. }
                | Error::PriorNotPositiveDefinite { .. }
                | Error::PrecisionNotPositiveDefinite { .. }
                | Error::MapNotConverged { .. }
                | Error::AllRestartsFailed { .. }
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
