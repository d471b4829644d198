use std::path::PathBuf;

/// Failures surfaced by the binary, each with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.into().display()))
    }
}

impl From<mqf2::Error> for CliError {
    fn from(e: mqf2::Error) -> Self {
        use mqf2::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::DimensionMismatch { .. } | E::UnknownFrequency(_) | E::SeriesTooShort(_) => {
                CliError::Config(msg)
            }
            E::Parse { .. } | E::MissingMetadata(_) | E::LengthMismatch { .. } | E::Checkpoint(_) | E::Io { .. } => {
                CliError::Io(msg)
            }
            E::NonConvergence { .. }
            | E::HessianNotPD
            | E::NonFiniteLoss { .. }
            | E::FactorizationFailure
            | E::ZeroDenominator
            | E::ZeroSeasonalError
            | E::DegenerateVariance { .. }
            | E::EmptySampleSet
            | E::Autodiff(_) => CliError::Numerical(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
