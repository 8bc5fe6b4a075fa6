use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::affinity::{step_affinity, AffinityAccumulator, AffinityMatrix};
use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::nn::{self, sgd_step, OptimizerState, SgdConfig};
use crate::rng::StreamRng;
use crate::task::TaskId;

/// Local-training settings for one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    /// Affinity frequency in batches; 0 disables measurement.
    pub rho: usize,
    pub lr: f64,
    pub sgd: SgdConfig,
    /// 1-based round tag stamped on the affinity matrix.
    pub round: usize,
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub model: MultiTaskModel,
    /// Training samples, the FedAvg weight.
    pub size: usize,
    /// Row-weighted mean training loss per task over all local steps.
    pub train_losses: BTreeMap<TaskId, f64>,
    pub affinity: Option<AffinityMatrix>,
    pub affinity_samples: usize,
    pub batches: usize,
}

/// Trains `model` on one client for `epochs` passes over its shuffled
/// batches with fresh momentum buffers. When `rho > 0`, every `rho`-th batch
/// of an epoch is first used to measure lookahead affinities at the current
/// parameters, then trained on as usual.
pub fn client_execution(
    model: &MultiTaskModel,
    data: &ClientDataset,
    opts: &LocalTraining,
    rng: &mut StreamRng,
) -> Result<ClientUpdate> {
    run_local(model, data, opts, rng).map_err(|e| Error::Client {
        client: data.id,
        round: opts.round,
        source: Box::new(e),
    })
}

fn run_local(
    model: &MultiTaskModel,
    data: &ClientDataset,
    opts: &LocalTraining,
    rng: &mut StreamRng,
) -> Result<ClientUpdate> {
    let mut local = model.clone();
    let mut state = OptimizerState::new(opts.sgd, local.params());
    let tasks: Vec<TaskId> = local.tasks().cloned().collect();
    let measure = opts.rho > 0 && tasks.len() >= 2;
    let mut acc = AffinityAccumulator::new(tasks.clone());

    let mut loss_sums: BTreeMap<TaskId, f64> = tasks.iter().map(|t| (t.clone(), 0.0)).collect();
    let mut rows_seen = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for (pos, &b) in order.iter().enumerate() {
            let batch = &data.train[b];
            if measure && (pos + 1) % opts.rho == 0 {
                acc.accumulate(&step_affinity(&local, batch, opts.lr)?)?;
            }
            let pass = nn::backward(local.arch(), local.params(), batch)?;
            let rows = batch.rows() as f64;
            for (t, l) in &pass.losses {
                *loss_sums.get_mut(t).unwrap() += rows * l;
            }
            rows_seen += batch.rows();
            sgd_step(local.params_mut(), &pass.grads, &mut state, opts.lr)?;
        }
    }

    let train_losses = loss_sums
        .into_iter()
        .map(|(t, s)| (t, s / rows_seen as f64))
        .collect();
    let affinity = if measure {
        acc.client_round_average(opts.round)?
    } else {
        None
    };
    Ok(ClientUpdate {
        client: data.id,
        model: local,
        size: data.size,
        train_losses,
        affinity,
        affinity_samples: acc.samples(),
        batches: data.train.len(),
    })
}
