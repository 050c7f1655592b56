use thiserror::Error;

/// Errors surfaced by the engine.
///
/// Numerical failures inside a single Monte Carlo replicate (singular design,
/// divergence, degenerate variance) are tallied by the power loop rather than
/// aborting it; everything else is a configuration-level error.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("zero proportion {pi0} is not representable by a negative binomial with mean {mu}: it must exceed the Poisson floor exp(-mu) = {floor:.6}")]
    NotNbRepresentable { mu: f64, pi0: f64, floor: f64 },

    #[error("count region has negligible probability mass ({mass:e}) under the given marginal")]
    DegenerateRegion { mass: f64 },

    #[error("matrix is not positive definite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible subgroup sizes: {0}")]
    Infeasible(String),

    #[error("design is singular: {0}")]
    SingularDesign(String),

    #[error("estimating-equation solver did not converge after {iterations} iterations (last step {last_step:e})")]
    Divergence { iterations: usize, last_step: f64 },

    #[error("estimated variance of the contrast is not positive ({0:e})")]
    DegenerateVariance(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("target correlation {target} is unreachable; achievable range on the positive-definite grid is [{min:.4}, {max:.4}]")]
    UnreachableTarget { target: f64, min: f64, max: f64 },

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures that belong to a single simulated dataset rather than to the configuration.
    pub fn is_replicate_failure(&self) -> bool {
        matches!(
            self,
            Error::SingularDesign(_) | Error::Divergence { .. } | Error::DegenerateVariance(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
