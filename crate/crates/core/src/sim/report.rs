use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::cost::{CostReport, StageCost};
use crate::affinity::AffinityMatrix;
use crate::error::Result;
use crate::partition::Partition;
use crate::task::TaskId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AllInOne,
    Split,
    OneByOne,
    Standalone,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::AllInOne => "all_in_one",
            Phase::Split => "split",
            Phase::OneByOne => "one_by_one",
            Phase::Standalone => "standalone",
        }
    }
}

/// Losses of one task after one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based global round.
    pub round: usize,
    pub phase: Phase,
    pub task: TaskId,
    pub split_id: Option<usize>,
    /// Mean local training loss of the round's clients, weighted by size.
    pub train_loss: f64,
    /// Pooled test loss of the aggregated model.
    pub test_loss: f64,
}

/// The split decision and the scores behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub score_round: usize,
    pub partition: Partition,
    pub per_task: BTreeMap<TaskId, f64>,
    pub total: f64,
    /// Server matrix of `score_round` with its self-affinity diagonal.
    pub matrix: AffinityMatrix,
}

/// One independent single-task run of the one-by-one baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRunReport {
    pub task: TaskId,
    pub final_test_loss: f64,
    pub rounds: usize,
    pub cost: StageCost,
}

/// Final pooled test losses of one standalone client model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLossSummary {
    pub client: usize,
    pub per_task: BTreeMap<TaskId, f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundRecord>,
    pub final_test_losses: BTreeMap<TaskId, f64>,
    /// Sum of `final_test_losses`.
    pub final_total_test_loss: f64,
    pub partition: Option<PartitionReport>,
    pub ground_truth: Option<Partition>,
    /// Server affinity matrices of every measured round, raw diagonal.
    pub affinity: Vec<AffinityMatrix>,
    pub cost: CostReport,
    pub task_runs: Vec<TaskRunReport>,
    pub standalone_clients: Vec<ClientLossSummary>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `round,phase,task,split_id,train_loss,test_loss`, one row per record.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("round,phase,task,split_id,train_loss,test_loss\n");
        for r in &self.rounds {
            let split = r.split_id.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                r.phase.as_str(),
                r.task,
                split,
                r.train_loss,
                r.test_loss
            );
        }
        out
    }

    /// Whether the chosen partition equals the generating clustering.
    pub fn recovered_ground_truth(&self) -> Option<bool> {
        Some(self.partition.as_ref()?.partition == *self.ground_truth.as_ref()?)
    }
}
