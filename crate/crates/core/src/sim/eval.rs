use std::collections::BTreeMap;

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{MultiTaskModel, TaskLosses};
use crate::task::TaskId;

fn pooled(models: &[&MultiTaskModel], clients: &[&ClientDataset]) -> Result<TaskLosses> {
    let mut sums: BTreeMap<TaskId, f64> = BTreeMap::new();
    for m in models {
        for t in m.tasks() {
            if sums.insert(t.clone(), 0.0).is_some() {
                return Err(Error::DuplicateTask(t.clone()));
            }
        }
    }
    let mut rows = 0usize;
    for c in clients {
        for batch in &c.test {
            rows += batch.rows();
            for m in models {
                for (t, l) in m.joint_loss(batch)?.per_task {
                    *sums.get_mut(&t).unwrap() += batch.rows() as f64 * l;
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::InvalidData("empty test set".into()));
    }
    Ok(TaskLosses::from_map(
        sums.into_iter()
            .map(|(t, s)| (t, s / rows as f64))
            .collect(),
    ))
}

/// Test loss of every task over the pooled test samples of all clients.
/// Each task is evaluated with the one model among `models` that has its
/// head; the total is the plain sum over tasks.
pub fn evaluate(models: &[&MultiTaskModel], clients: &[ClientDataset]) -> Result<TaskLosses> {
    let refs: Vec<&ClientDataset> = clients.iter().collect();
    pooled(models, &refs)
}

/// The same losses computed separately on each client's test data.
pub fn evaluate_per_client(
    models: &[&MultiTaskModel],
    clients: &[ClientDataset],
) -> Result<Vec<(usize, usize, TaskLosses)>> {
    clients
        .iter()
        .filter(|c| c.test_size() > 0)
        .map(|c| Ok((c.id, c.test_size(), pooled(models, &[c])?)))
        .collect()
}
