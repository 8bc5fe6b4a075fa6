use thiserror::Error;

use crate::task::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite loss for task {task}")]
    NonFiniteLoss { task: TaskId },

    #[error("non-finite parameter update in layer {layer}")]
    NonFiniteUpdate { layer: String },

    #[error("missing target for task {0}")]
    MissingTarget(TaskId),

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("duplicate task id {0}")]
    DuplicateTask(TaskId),

    #[error("round {round} is outside the schedule of {total} rounds")]
    ScheduleOutOfRange { round: usize, total: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid block count {blocks} for {tasks} tasks")]
    InvalidBlockCount { tasks: usize, blocks: usize },

    #[error(
        "{tasks} tasks exceed the enumeration guard of {guard}; \
         raise PartitionSearch::max_tasks explicitly to search anyway"
    )]
    EnumerationGuard { tasks: usize, guard: usize },

    #[error("affinity error: {0}")]
    Affinity(String),

    #[error("no affinity measurements for round {0}")]
    NoMeasurement(usize),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("client {client} failed in round {round}: {source}")]
    Client {
        client: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
