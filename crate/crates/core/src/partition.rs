//! Disjoint groupings of tasks and their total affinity score.
//!
//! Partitions of `{0..n}` into exactly `x` blocks are generated as
//! restricted growth strings in lexicographic order, which is also the
//! canonical order used to break ties between equally scored groupings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::task::TaskId;

/// Default cap on the task count accepted by [`best_partition`].
pub const DEFAULT_MAX_TASKS: usize = 14;

/// Non-empty, pairwise-disjoint blocks of task ids in canonical order:
/// members sorted, blocks sorted by their smallest member.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    blocks: Vec<Vec<TaskId>>,
}

impl Partition {
    pub fn new(mut blocks: Vec<Vec<TaskId>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for block in &mut blocks {
            if block.is_empty() {
                return Err(Error::InvalidPartition("empty block".into()));
            }
            block.sort();
            for t in block.iter() {
                if !seen.insert(t.clone()) {
                    return Err(Error::InvalidPartition(format!("task {t} appears twice")));
                }
            }
        }
        blocks.sort_by(|a, b| a[0].cmp(&b[0]));
        Ok(Partition { blocks })
    }

    /// Builds the partition for index blocks over a sorted task list.
    pub fn from_indices(blocks: &[Vec<usize>], tasks: &[TaskId]) -> Result<Self> {
        Partition::new(
            blocks
                .iter()
                .map(|b| b.iter().map(|&i| tasks[i].clone()).collect())
                .collect(),
        )
    }

    pub fn blocks(&self) -> &[Vec<TaskId>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.blocks.iter().flatten().cloned().collect()
    }

    /// Index of the block holding `task`.
    pub fn block_of(&self, task: &TaskId) -> Option<usize> {
        self.blocks
            .iter()
            .position(|b| b.binary_search(task).is_ok())
    }

    pub fn check_covers(&self, tasks: &BTreeSet<TaskId>) -> Result<()> {
        let mine = self.tasks();
        if &mine != tasks {
            return Err(Error::InvalidPartition(format!(
                "partition covers {:?}, expected {:?}",
                mine, tasks
            )));
        }
        Ok(())
    }
}

/// Iterator over the partitions of `{0..n}` into exactly `x` blocks.
#[derive(Clone, Debug)]
pub struct IndexPartitions {
    n: usize,
    x: usize,
    rgs: Vec<usize>,
    done: bool,
}

/// Every partition of `n` items into exactly `x` non-empty blocks, each
/// once, in canonical order. There are S(n, x) of them (Stirling numbers of
/// the second kind).
pub fn enumerate_partitions(n: usize, x: usize) -> Result<IndexPartitions> {
    if x < 1 || x > n {
        return Err(Error::InvalidBlockCount {
            tasks: n,
            blocks: x,
        });
    }
    let mut it = IndexPartitions {
        n,
        x,
        rgs: vec![0; n],
        done: false,
    };
    it.complete_from(1, 1);
    Ok(it)
}

impl IndexPartitions {
    /// Fills `rgs[pos..]` with the smallest suffix that still reaches `x`
    /// blocks, given `used` blocks in the prefix.
    fn complete_from(&mut self, pos: usize, mut used: usize) {
        for i in pos..self.n {
            if self.x - used == self.n - i {
                self.rgs[i] = used;
                used += 1;
            } else {
                self.rgs[i] = 0;
            }
        }
    }

    fn advance(&mut self) -> bool {
        let mut used = 0;
        let prefix_used: Vec<usize> = self
            .rgs
            .iter()
            .map(|&r| {
                let before = used;
                used = used.max(r + 1);
                before
            })
            .collect();
        for i in (1..self.n).rev() {
            let v = self.rgs[i] + 1;
            if v > prefix_used[i] || v >= self.x {
                continue;
            }
            let used_after = prefix_used[i].max(v + 1);
            if self.x - used_after < self.n - i {
                self.rgs[i] = v;
                self.complete_from(i + 1, used_after);
                return true;
            }
        }
        false
    }

    fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.x];
        for (i, &b) in self.rgs.iter().enumerate() {
            blocks[b].push(i);
        }
        blocks
    }
}

impl Iterator for IndexPartitions {
    type Item = Vec<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.blocks();
        self.done = !self.advance();
        Some(out)
    }
}

/// A partition with its per-task affinity scores and their total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPartition {
    pub partition: Partition,
    pub per_task: BTreeMap<TaskId, f64>,
    pub total: f64,
}

/// Per-task score by index, plus the total summed in index order.
fn score_indices(blocks: &[Vec<usize>], matrix: &AffinityMatrix) -> Result<(Vec<f64>, f64)> {
    let mut per_task = vec![0.0; matrix.n()];
    for block in blocks {
        if let [single] = block[..] {
            if !matrix.is_diagonal_finalized() {
                return Err(Error::Affinity(
                    "singleton block needs a finalized self-affinity diagonal".into(),
                ));
            }
            per_task[single] = matrix.get(single, single);
            continue;
        }
        let others = (block.len() - 1) as f64;
        for &i in block {
            let incoming: f64 = block
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| matrix.get(j, i))
                .sum();
            per_task[i] = incoming / others;
        }
    }
    let total = per_task.iter().sum();
    Ok((per_task, total))
}

fn index_blocks(partition: &Partition, matrix: &AffinityMatrix) -> Result<Vec<Vec<usize>>> {
    partition.check_covers(&matrix.tasks().iter().cloned().collect())?;
    Ok(partition
        .blocks()
        .iter()
        .map(|b| b.iter().map(|t| matrix.index_of(t).unwrap()).collect())
        .collect())
}

/// Total affinity of a grouping. A task in a block of size `m >= 2` scores
/// the mean affinity flowing into it from its `m - 1` block mates; a task
/// alone in its block scores its self-affinity.
pub fn split_score(partition: &Partition, matrix: &AffinityMatrix) -> Result<ScoredPartition> {
    let blocks = index_blocks(partition, matrix)?;
    let (scores, total) = score_indices(&blocks, matrix)?;
    Ok(ScoredPartition {
        partition: partition.clone(),
        per_task: matrix.tasks().iter().cloned().zip(scores).collect(),
        total,
    })
}

/// Search options for [`best_partition_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionSearch {
    pub max_tasks: usize,
    /// Consider every block count in `1..=x` instead of exactly `x`.
    pub at_most: bool,
}

impl Default for PartitionSearch {
    fn default() -> Self {
        PartitionSearch {
            max_tasks: DEFAULT_MAX_TASKS,
            at_most: false,
        }
    }
}

/// Highest-scoring partition into exactly `x` blocks; the first one in
/// canonical order wins ties.
pub fn best_partition(matrix: &AffinityMatrix, x: usize) -> Result<ScoredPartition> {
    best_partition_with(matrix, x, PartitionSearch::default())
}

pub fn best_partition_with(
    matrix: &AffinityMatrix,
    x: usize,
    search: PartitionSearch,
) -> Result<ScoredPartition> {
    let n = matrix.n();
    if n > search.max_tasks {
        return Err(Error::EnumerationGuard {
            tasks: n,
            guard: search.max_tasks,
        });
    }
    if x < 1 || x > n {
        return Err(Error::InvalidBlockCount {
            tasks: n,
            blocks: x,
        });
    }
    let counts = if search.at_most { 1..=x } else { x..=x };
    let mut best: Option<(Vec<Vec<usize>>, Vec<f64>, f64)> = None;
    for k in counts {
        for blocks in enumerate_partitions(n, k)? {
            let (scores, total) = score_indices(&blocks, matrix)?;
            if best.as_ref().is_none_or(|(_, _, b)| total > *b) {
                best = Some((blocks, scores, total));
            }
        }
    }
    let (blocks, scores, total) = best.expect("at least one partition exists");
    Ok(ScoredPartition {
        partition: Partition::from_indices(&blocks, matrix.tasks())?,
        per_task: matrix.tasks().iter().cloned().zip(scores).collect(),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::finalize_diagonal;

    fn ids(n: usize) -> Vec<TaskId> {
        (1..=n).map(|i| TaskId::new(format!("a{i:02}"))).collect()
    }

    #[test]
    fn five_tasks_two_and_three_blocks() {
        assert_eq!(enumerate_partitions(5, 2).unwrap().count(), 15);
        assert_eq!(enumerate_partitions(5, 3).unwrap().count(), 25);
    }

    #[test]
    fn finest_and_coarsest_are_unique() {
        let all: Vec<_> = enumerate_partitions(3, 3).unwrap().collect();
        assert_eq!(all, vec![vec![vec![0], vec![1], vec![2]]]);
        let one: Vec<_> = enumerate_partitions(4, 1).unwrap().collect();
        assert_eq!(one, vec![vec![vec![0, 1, 2, 3]]]);
    }

    #[test]
    fn canonical_order_for_three_items_two_blocks() {
        let all: Vec<_> = enumerate_partitions(3, 2).unwrap().collect();
        assert_eq!(
            all,
            vec![
                vec![vec![0, 1], vec![2]],
                vec![vec![0, 2], vec![1]],
                vec![vec![0], vec![1, 2]],
            ]
        );
    }

    #[test]
    fn invalid_block_counts() {
        assert!(enumerate_partitions(3, 0).is_err());
        assert!(enumerate_partitions(3, 4).is_err());
    }

    #[test]
    fn partition_validation() {
        let t = ids(3);
        assert!(Partition::new(vec![vec![t[0].clone()], vec![]]).is_err());
        assert!(Partition::new(vec![vec![t[0].clone()], vec![t[0].clone()]]).is_err());
        let p = Partition::new(vec![vec![t[2].clone(), t[1].clone()], vec![t[0].clone()]]).unwrap();
        assert_eq!(p.blocks()[0], vec![t[0].clone()]);
        assert_eq!(p.blocks()[1], vec![t[1].clone(), t[2].clone()]);
    }

    #[test]
    fn singleton_requires_finalized_diagonal() {
        let m = AffinityMatrix::new(ids(2), vec![vec![0.0, 0.1], vec![0.2, 0.0]], 1).unwrap();
        let p = Partition::from_indices(&[vec![0], vec![1]], &ids(2)).unwrap();
        assert!(split_score(&p, &m).is_err());
        let f = finalize_diagonal(&m).unwrap();
        let s = split_score(&p, &f).unwrap();
        assert!((s.total - 2.0 * 0.15).abs() < 1e-15);
    }

    #[test]
    fn all_singletons_score_the_trace() {
        let m = AffinityMatrix::new(
            ids(3),
            vec![
                vec![0.0, 0.3, -0.2],
                vec![0.1, 0.0, 0.5],
                vec![0.4, -0.6, 0.0],
            ],
            1,
        )
        .unwrap();
        let f = finalize_diagonal(&m).unwrap();
        let p = Partition::from_indices(&[vec![0], vec![1], vec![2]], &ids(3)).unwrap();
        let trace = f.get(0, 0) + f.get(1, 1) + f.get(2, 2);
        assert_eq!(split_score(&p, &f).unwrap().total, trace);
    }

    #[test]
    fn uniform_matrix_ties_every_grouping() {
        let m = finalize_diagonal(&AffinityMatrix::new(ids(3), vec![vec![0.1; 3]; 3], 1).unwrap())
            .unwrap();
        for x in 1..=3 {
            for blocks in enumerate_partitions(3, x).unwrap() {
                let p = Partition::from_indices(&blocks, &ids(3)).unwrap();
                assert!((split_score(&p, &m).unwrap().total - 0.3).abs() < 1e-15);
            }
        }
        // first in canonical order wins the tie
        let best = best_partition(&m, 2).unwrap();
        assert_eq!(
            best.partition,
            Partition::from_indices(&[vec![0, 1], vec![2]], &ids(3)).unwrap()
        );
    }

    #[test]
    fn extreme_block_counts() {
        let m = finalize_diagonal(
            &AffinityMatrix::new(ids(4), vec![vec![0.5, -1.0, 2.0, 0.0]; 4], 1).unwrap(),
        )
        .unwrap();
        assert_eq!(best_partition(&m, 4).unwrap().partition.len(), 4);
        assert_eq!(best_partition(&m, 1).unwrap().partition.len(), 1);
    }

    #[test]
    fn recovers_two_affine_pairs() {
        // pairs {a1,a3} and {a2,a4}
        let pair = |i: usize, j: usize| (i % 2) == (j % 2);
        let scores = (0..4)
            .map(|i| {
                (0..4)
                    .map(|j| if pair(i, j) { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let m = finalize_diagonal(&AffinityMatrix::new(ids(4), scores, 1).unwrap()).unwrap();
        let best = best_partition(&m, 2).unwrap();
        assert_eq!(
            best.partition,
            Partition::from_indices(&[vec![0, 2], vec![1, 3]], &ids(4)).unwrap()
        );
        assert_eq!(best.total, 4.0);
    }

    #[test]
    fn guard_rejects_large_task_sets() {
        let m = AffinityMatrix::new(ids(15), vec![vec![0.0; 15]; 15], 1).unwrap();
        assert!(matches!(
            best_partition(&m, 2),
            Err(Error::EnumerationGuard {
                tasks: 15,
                guard: 14
            })
        ));
    }

    #[test]
    fn at_most_considers_fewer_blocks() {
        let scores = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        let m = finalize_diagonal(&AffinityMatrix::new(ids(3), scores, 1).unwrap()).unwrap();
        let search = PartitionSearch {
            at_most: true,
            ..PartitionSearch::default()
        };
        assert_eq!(
            best_partition_with(&m, 3, search).unwrap().partition.len(),
            1
        );
    }
}
