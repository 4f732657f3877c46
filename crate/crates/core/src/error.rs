use thiserror::Error;

use crate::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected}, got {got:?}")]
    Shape {
        layer: String,
        expected: String,
        got: Vec<usize>,
    },

    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("task {0} is already present in the joint network")]
    TaskExists(TaskId),

    #[error("invalid network operation: {0}")]
    Network(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged for task {task}: non-finite loss at epoch {epoch}")]
    Diverged { task: TaskId, epoch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        layer: impl Into<String>,
        expected: impl Into<String>,
        got: &[usize],
    ) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.into(),
            got: got.to_vec(),
        }
    }
}
