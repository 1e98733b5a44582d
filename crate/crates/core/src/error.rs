use thiserror::Error;

/// Errors raised by model construction, sampling and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix `{0}` is not symmetric positive definite")]
    NotSpd(String),
    #[error("sum of A_i^T A_i is rank deficient (identifiability assumption violated)")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("hyperparameters for worker {worker} violate the step-size constraint: gamma = {gamma} > rho/(1 + rho*M) = {limit}")]
    StepTooLarge { worker: usize, gamma: f64, limit: f64 },
    #[error("hyperparameters have not been validated (pass an explicit override to run anyway)")]
    NotValidated,
    #[error("chain diverged at iteration {0}")]
    Diverged(usize),
    #[error("optimizer failed to converge: {0}")]
    NoConvergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
