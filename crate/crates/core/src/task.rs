use std::fmt;

use serde::{Deserialize, Serialize};

/// Stable identifier of one FL task.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(id: impl Into<String>) -> Self {
        TaskId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_string())
    }
}

impl From<String> for TaskId {
    fn from(s: String) -> Self {
        TaskId(s)
    }
}

/// Per-task regression loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared error over all output entries.
    #[default]
    Mse,
    /// Mean of `ln cosh(pred - target)`; quadratic near zero, linear in the tails.
    LogCosh,
}

/// Identity and head description of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub out_dim: usize,
    #[serde(default)]
    pub loss: LossKind,
}

impl TaskSpec {
    pub fn new(id: impl Into<TaskId>, out_dim: usize) -> Self {
        TaskSpec {
            id: id.into(),
            out_dim,
            loss: LossKind::Mse,
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }
}
