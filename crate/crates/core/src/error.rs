use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Missing or malformed columns, unparsable cells.
    #[error("schema error: {0}")]
    Schema(String),

    /// Data that parses but violates a data-model invariant.
    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("event {event}: complete or quasi-complete separation (|coef| = {norm:.2})")]
    Separation { event: usize, norm: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigen:.3e}, scale {scale:.3e})")]
    NotPsd { min_eigen: f64, scale: f64 },

    #[error("pooling unavailable, full calibration recommended: {0}")]
    PoolingUnavailable(String),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Separation { .. }
                | Error::Singular(_)
                | Error::NonConvergence(_)
                | Error::Degenerate(_)
                | Error::NotPsd { .. }
                | Error::PoolingUnavailable(_)
        )
    }
}
