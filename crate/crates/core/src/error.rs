use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: rating {value} outside [{min}, {max}]")]
    RatingOutOfScale {
        line: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("line {line}: duplicate rating for user {user}, item {item}")]
    DuplicatePair { line: usize, user: u64, item: u64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("weight vector has {found} entries, dataset has {expected} ratings")]
    WeightLength { expected: usize, found: usize },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("ensemble member {index} failed: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
