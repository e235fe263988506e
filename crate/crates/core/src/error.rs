use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("sentence is empty after tokenization")]
    EmptySentence,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid split: test size {test_size} must be in 1..{n}")]
    InvalidSplit { test_size: usize, n: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("insufficient training: {0}")]
    InsufficientTraining(String),
    #[error("degenerate query: zero-norm vector")]
    DegenerateQuery,
    #[error("training diverged at epoch/iteration {at}: loss is not finite")]
    TrainingDiverged { at: usize },
    #[error("optimization diverged at step {step}: gradient is not finite")]
    OptimizationDiverged { step: usize },
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("training data contains a single class")]
    DegenerateLabels,
    #[error("relabel filter removed every item")]
    EmptyAfterFilter,
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("invalid sentiment score {0}: must lie in [0, 1]")]
    InvalidScore(f64),
    #[error("invalid reward weights alpha={alpha}, beta={beta}")]
    InvalidWeights { alpha: f64, beta: f64 },
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] sentiscale_nn::NnError),
}

pub type Result<T> = std::result::Result<T, CoreError>;
