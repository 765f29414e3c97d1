use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("cannot parse model spec `{spec}`: {reason}")]
    ModelSpec { spec: String, reason: String },
    #[error("divergent moment: {0}")]
    DivergentMoment(String),
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("quadrature did not converge on [{a}, {b}] (estimated error {error:e})")]
    Quadrature { a: f64, b: f64, error: f64 },
    #[error("no observations")]
    EmptySample,
    #[error("all observations are zero")]
    AllZero,
    #[error("naive estimator undefined: {0}")]
    NaiveUndefined(String),
    #[error("covariance factorization failed: {0}")]
    Factorization(String),
    #[error("invalid perturbation: {0}")]
    Perturbation(String),
    #[error("inverse-cdf table construction failed: {0}")]
    Table(String),
    #[error("replication {index} failed: {source}")]
    Replication { index: usize, source: Box<Error> },
    #[error("input row {row}: {reason}")]
    Input { row: usize, reason: String },
    #[error("{0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
