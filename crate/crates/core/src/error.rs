use std::path::PathBuf;

use mqf2_autodiff::AutodiffError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("inversion did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("hessian is not positive definite")]
    HessianNotPD,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("missing dataset metadata at {0}")]
    MissingMetadata(PathBuf),
    #[error("series {id}: covariate row has length {got}, target has length {expected}")]
    LengthMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("series too short: {}", .0.join(", "))]
    SeriesTooShort(Vec<String>),
    #[error("unknown frequency `{0}`")]
    UnknownFrequency(String),
    #[error("covariance factorization failed; increase the jitter")]
    FactorizationFailure,
    #[error("weighted quantile loss denominator is zero")]
    ZeroDenominator,
    #[error("seasonal error is zero or undefined")]
    ZeroSeasonalError,
    #[error("zero variance at horizon step {step}")]
    DegenerateVariance { step: usize },
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
