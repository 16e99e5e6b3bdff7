use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank {requested} exceeds adapter capacity {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("non-finite value while scoring sample {id}: {detail}")]
    Scoring { id: u64, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
