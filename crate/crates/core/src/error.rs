use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("prerequisite cycle through concepts {0:?}")]
    CycleDetected(Vec<usize>),
    #[error("index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("mastery {value} at concept {index} outside [0, 1]")]
    MasteryOutOfRange { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid action {0}")]
    InvalidAction(usize),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("feasible action set is empty")]
    EmptyFeasibleSet,
    #[error("non-finite logit at action {0}")]
    NonFiniteLogit(usize),
    #[error("frontier action {0} is outside the feasible mask")]
    FrontierOutsideMask(usize),
    #[error("executed probability of action {0} is zero")]
    ZeroExecutedProbability(usize),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid step-size exponents: p_alpha={p_alpha}, p_beta={p_beta}")]
    InvalidExponents { p_alpha: f64, p_beta: f64 },
    #[error("non-finite loss at update {0}")]
    NonFiniteLoss(usize),
    #[error("baseline value is zero")]
    ZeroBaseline,
    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),
    #[error("history has {len} entries, window needs {needed}")]
    InsufficientHistory { len: usize, needed: usize },
    #[error("baseline budgets missing for suite {0}")]
    BaselineMissing(String),
    #[error("baseline report lacks cost means")]
    MissingBaseline,
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
