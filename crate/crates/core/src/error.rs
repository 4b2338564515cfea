use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration space: {0}")]
    InvalidSpace(String),

    #[error("parameter `{parameter}`: {reason}")]
    Validation { parameter: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate configuration id {0}")]
    DuplicateId(u64),

    #[error("unmeasured configuration {0}")]
    Unmeasured(u64),

    #[error("non-finite performance value {0}")]
    NonFinite(f64),

    #[error("degenerate training set: {0}")]
    DegenerateTrainingSet(String),

    #[error("feature dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("nothing to query: the unlabeled set is empty")]
    NothingToQuery,

    #[error("incomplete label history window: {have} of {need} predictions")]
    IncompleteWindow { have: usize, need: usize },

    #[error("test suite overlaps training configuration {0}")]
    TestOverlap(u64),

    #[error("id sets differ: {0}")]
    IdMismatch(String),

    #[error("session state: {0}")]
    State(String),

    #[error("time budget exceeded: initial measurements cost {cost}s, constraint is {limit}s")]
    Budget { cost: f64, limit: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(parameter: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            parameter: parameter.into(),
            reason: reason.into(),
        }
    }
}
