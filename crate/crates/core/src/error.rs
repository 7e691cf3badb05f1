use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The posterior normalizer of one observation vanished on the quadrature rule.
    #[error("observation {index}: posterior normalizer is zero (no prior mass where the likelihood is supported)")]
    ZeroNormalizer { index: usize },

    /// Every kernel contribution to a marginal likelihood was -inf.
    #[error("observation {index}: marginal likelihood is zero in log space")]
    DegenerateLikelihood { index: usize },

    #[error("non-finite integrand value at quadrature node {index}")]
    NonFiniteNode { index: usize },

    #[error("interquartile range is zero in every dimension; supply the scale U manually")]
    DegenerateScale,

    #[error("eigendecomposition failed at query point {location:?}")]
    Eigen { location: Vec<f64> },

    #[error("every sigma candidate had at least one failed fold")]
    AllCandidatesFailed,

    #[error("transport problem: {0}")]
    Transport(String),

    #[error("csv {path}: row {row}, column {column}: {message}")]
    Csv { path: String, row: usize, column: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
