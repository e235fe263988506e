use sentiscale_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Usage(String),
    #[error("{0} is being served; stop the service before retraining into it")]
    Served(String),
    #[error("service error: {0}")]
    Service(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

/// Process exit status per error class.
pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Served(_) => 9,
        CliError::Service(_) => 10,
        CliError::Core(c) => match c {
            CoreError::Config(_) | CoreError::InvalidWeights { .. } | CoreError::InvalidArgument(_) | CoreError::InvalidScore(_) => 3,
            CoreError::Parse { .. }
            | CoreError::EmptySentence
            | CoreError::EmptyCorpus
            | CoreError::InvalidSplit { .. }
            | CoreError::InsufficientData(_)
            | CoreError::Encoding(_)
            | CoreError::DegenerateLabels
            | CoreError::EmptyAfterFilter
            | CoreError::DegenerateCorpus(_)
            | CoreError::DegenerateQuery => 4,
            CoreError::MissingDependency(_) => 5,
            CoreError::TrainingDiverged { .. } | CoreError::OptimizationDiverged { .. } | CoreError::InsufficientTraining(_) => 6,
            CoreError::Io(_) | CoreError::Json(_) => 7,
            CoreError::Nn(_) => 8,
        },
    }
}
