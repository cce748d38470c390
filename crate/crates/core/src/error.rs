use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("missing activation for node `{0}`")]
    MissingActivation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all-zero signal at sample {sample}: power is undefined")]
    ZeroPower { sample: usize },

    #[error("exit index {index} out of range 1..={exits}")]
    ExitOutOfRange { index: usize, exits: usize },

    #[error("infeasible budget: per-sample budget {per_sample} is below the cheapest exit cost {min_cost}")]
    InfeasibleBudget { per_sample: f64, min_cost: f64 },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        trace: Box<crate::trainer::TrainTrace>,
    },

    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
