//! Inter-task affinity from one-step trunk lookahead.
//!
//! For a source task `i` and target task `j` on one batch,
//!
//! ```text
//! S(i -> j) = 1 - L_j(trunk - lr * grad_trunk L_i, head_j) / L_j(trunk, head_j)
//! ```
//!
//! Positive values mean a trunk step for `i` lowers `j`'s loss. Samples are
//! averaged over measured steps on a client, then uniformly over the
//! clients of a round. The diagonal is replaced by the mean mutual
//! affinity of each task with all others before the matrix is used for
//! grouping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::nn::{self, Batch};
use crate::task::TaskId;

/// Denominators at or below this are treated as "no signal" and skipped.
pub const MIN_LOSS: f64 = 1e-12;

/// Averaged `source -> target` affinities for a sorted task list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    tasks: Vec<TaskId>,
    /// `scores[i][j]` is the affinity of task `i` onto task `j`.
    scores: Vec<Vec<f64>>,
    round: usize,
    diagonal_finalized: bool,
}

impl AffinityMatrix {
    pub fn new(tasks: Vec<TaskId>, scores: Vec<Vec<f64>>, round: usize) -> Result<Self> {
        let n = tasks.len();
        if n == 0 {
            return Err(Error::Affinity("empty task list".into()));
        }
        if !tasks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Affinity("task ids must be sorted and unique".into()));
        }
        if scores.len() != n || scores.iter().any(|row| row.len() != n) {
            return Err(Error::ShapeMismatch {
                context: "affinity matrix".into(),
                expected: vec![n, n],
                found: vec![scores.len(), scores.first().map_or(0, Vec::len)],
            });
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Affinity("non-finite affinity score".into()));
        }
        Ok(AffinityMatrix {
            tasks,
            scores,
            round,
            diagonal_finalized: false,
        })
    }

    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_diagonal_finalized(&self) -> bool {
        self.diagonal_finalized
    }

    /// Affinity of `source` onto `target`, by index.
    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.scores[source][target]
    }

    pub fn index_of(&self, task: &TaskId) -> Option<usize> {
        self.tasks.binary_search(task).ok()
    }

    /// Applies `f` to every entry; the result needs re-finalizing.
    pub fn map(&self, f: impl Fn(usize, usize, f64) -> f64) -> Result<AffinityMatrix> {
        let scores = self
            .scores
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(j, &v)| f(i, j, v)).collect())
            .collect();
        AffinityMatrix::new(self.tasks.clone(), scores, self.round)
    }

    /// Header `source,<task ids>`, then one row per source task.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in &self.tasks {
            write!(out, ",{t}").unwrap();
        }
        out.push('\n');
        for (t, row) in self.tasks.iter().zip(&self.scores) {
            out.push_str(t.as_str());
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Raw per-step affinities; `None` marks a skipped (near-zero loss) target.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAffinity {
    pub tasks: Vec<TaskId>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl StepAffinity {
    pub fn from_values(tasks: Vec<TaskId>, values: Vec<Vec<f64>>) -> Self {
        StepAffinity {
            tasks,
            values: values
                .into_iter()
                .map(|row| row.into_iter().map(Some).collect())
                .collect(),
        }
    }
}

/// Lookahead affinities of every task pair on one batch. Nothing in `model`
/// is modified.
pub fn step_affinity(model: &MultiTaskModel, batch: &Batch, lr: f64) -> Result<StepAffinity> {
    if model.num_tasks() < 2 {
        return Err(Error::Affinity("affinity needs at least two tasks".into()));
    }
    let arch = model.arch();
    let params = model.params();
    let before = nn::task_losses(arch, params, batch)?;
    let tasks: Vec<TaskId> = before.keys().cloned().collect();

    let mut lookahead = params.clone();
    let mut values = Vec::with_capacity(tasks.len());
    for source in &tasks {
        let (grad, _) = nn::trunk_gradient(arch, params, batch, source)?;
        lookahead.trunk.clone_from(&params.trunk);
        lookahead.trunk.axpy(-lr, &grad);
        let after = nn::task_losses(arch, &lookahead, batch)?;
        let row = tasks
            .iter()
            .map(|target| {
                let b = before[target];
                (b > MIN_LOSS).then(|| 1.0 - after[target] / b)
            })
            .collect();
        values.push(row);
    }
    Ok(StepAffinity { tasks, values })
}

/// Running per-pair sums over the measured steps of one client round.
#[derive(Clone, Debug)]
pub struct AffinityAccumulator {
    tasks: Vec<TaskId>,
    sums: Vec<Vec<f64>>,
    counts: Vec<Vec<usize>>,
    samples: usize,
}

impl AffinityAccumulator {
    pub fn new(tasks: Vec<TaskId>) -> Self {
        let n = tasks.len();
        AffinityAccumulator {
            tasks,
            sums: vec![vec![0.0; n]; n],
            counts: vec![vec![0; n]; n],
            samples: 0,
        }
    }

    /// Number of measurement events, skipped pairs included.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn accumulate(&mut self, step: &StepAffinity) -> Result<()> {
        if step.tasks != self.tasks {
            return Err(Error::Affinity(format!(
                "step tasks {:?} do not match accumulator tasks {:?}",
                step.tasks, self.tasks
            )));
        }
        for (i, row) in step.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    self.sums[i][j] += v;
                    self.counts[i][j] += 1;
                }
            }
        }
        self.samples += 1;
        Ok(())
    }

    /// Mean over the recorded samples, or `None` when nothing was measured.
    /// A pair whose every sample was skipped averages to zero.
    pub fn client_round_average(&self, round: usize) -> Result<Option<AffinityMatrix>> {
        if self.samples == 0 {
            return Ok(None);
        }
        let scores = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                    .collect()
            })
            .collect();
        AffinityMatrix::new(self.tasks.clone(), scores, round).map(Some)
    }
}

fn check_compatible(matrices: &[AffinityMatrix]) -> Result<&AffinityMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Affinity("no client matrices to aggregate".into()))?;
    for m in &matrices[1..] {
        if m.tasks != first.tasks || m.round != first.round {
            return Err(Error::Affinity(format!(
                "client matrix (round {}) does not match round {} task order",
                m.round, first.round
            )));
        }
    }
    Ok(first)
}

/// Unweighted element-wise mean over clients, reduced in slice order.
pub fn server_aggregate(matrices: &[AffinityMatrix]) -> Result<AffinityMatrix> {
    let first = check_compatible(matrices)?;
    let mut scores = first.scores.clone();
    for m in &matrices[1..] {
        for (acc, row) in scores.iter_mut().zip(&m.scores) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    let k = matrices.len() as f64;
    scores.iter_mut().flatten().for_each(|v| *v /= k);
    AffinityMatrix::new(first.tasks.clone(), scores, first.round)
}

/// Mean weighted by `weights` (normalized to one), e.g. client dataset sizes.
pub fn server_aggregate_weighted(
    matrices: &[AffinityMatrix],
    weights: &[f64],
) -> Result<AffinityMatrix> {
    let first = check_compatible(matrices)?;
    if weights.len() != matrices.len() || weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
        return Err(Error::Affinity(
            "weights must be positive, one per client".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    let n = first.n();
    let mut scores = vec![vec![0.0; n]; n];
    for (m, w) in matrices.iter().zip(weights) {
        let p = w / total;
        for (acc, row) in scores.iter_mut().zip(&m.scores) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += p * b);
        }
    }
    AffinityMatrix::new(first.tasks.clone(), scores, first.round)
}

/// Replaces each diagonal entry with the task's self-affinity
///
/// ```text
/// S(i -> i) = sum_{j != i} (S(i -> j) + S(j -> i)) / (2n - 2)
/// ```
///
/// Off-diagonal entries are left untouched.
pub fn finalize_diagonal(matrix: &AffinityMatrix) -> Result<AffinityMatrix> {
    let n = matrix.n();
    if n < 2 {
        return Err(Error::Affinity(
            "self-affinity is undefined for a single task".into(),
        ));
    }
    let mut out = matrix.clone();
    let denom = (2 * n - 2) as f64;
    for i in 0..n {
        let mut sum = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            sum += matrix.scores[i][j] + matrix.scores[j][i];
        }
        out.scores[i][i] = sum / denom;
    }
    out.diagonal_finalized = true;
    Ok(out)
}

/// Convenience view of a matrix as `source -> target -> score`.
pub fn to_nested_map(matrix: &AffinityMatrix) -> BTreeMap<TaskId, BTreeMap<TaskId, f64>> {
    matrix
        .tasks
        .iter()
        .zip(&matrix.scores)
        .map(|(s, row)| {
            (
                s.clone(),
                matrix
                    .tasks
                    .iter()
                    .cloned()
                    .zip(row.iter().copied())
                    .collect(),
            )
        })
        .collect()
}
