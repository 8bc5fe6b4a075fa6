use rand::seq::index;

use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::nn::Params;
use crate::rng::{self, tag, StreamRng};
use crate::task::TaskId;

/// Which training phase a round belongs to; part of every stream key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PhaseKey {
    AllInOne,
    Split(usize),
    OneByOne(TaskId),
}

pub fn phase_key(phase: &PhaseKey) -> Vec<u64> {
    match phase {
        PhaseKey::AllInOne => vec![1],
        PhaseKey::Split(j) => vec![2, *j as u64],
        PhaseKey::OneByOne(t) => vec![3, rng::hash_str(t.as_str())],
    }
}

fn keyed(seed: u64, stream_tag: u64, phase: &PhaseKey, round: usize, extra: &[u64]) -> StreamRng {
    let mut key = vec![stream_tag];
    key.extend(phase_key(phase));
    key.push(round as u64);
    key.extend_from_slice(extra);
    rng::stream(seed, &key)
}

/// Stream for the client draw of `round` (0-based) in `phase`.
pub fn selection_stream(seed: u64, phase: &PhaseKey, round: usize) -> StreamRng {
    keyed(seed, tag::SELECT, phase, round, &[])
}

/// Stream for the local batch shuffles of `client` in `round`.
pub fn shuffle_stream(seed: u64, phase: &PhaseKey, round: usize, client: usize) -> StreamRng {
    keyed(seed, tag::SHUFFLE, phase, round, &[client as u64])
}

/// `k` of the ids in `pool`, uniformly without replacement, sorted.
pub fn select_clients(rng: &mut StreamRng, pool: &[usize], k: usize) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(Error::config(
            "select",
            format!("cannot select {k} of {} clients", pool.len()),
        ));
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Weighted parameter average with weights normalized over the given
/// models, accumulated in slice order.
pub fn fedavg_aggregate(models: &[MultiTaskModel], weights: &[f64]) -> Result<MultiTaskModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidData("no client models to aggregate".into()))?;
    if weights.len() != models.len() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidData(
            "aggregation weights must be positive, one per model".into(),
        ));
    }
    for m in &models[1..] {
        if m.arch() != first.arch() {
            return Err(Error::ShapeMismatch {
                context: "fedavg".into(),
                expected: vec![first.param_count()],
                found: vec![m.param_count()],
            });
        }
    }
    let total: f64 = weights.iter().sum();
    let mut acc: Params = first.params().clone();
    acc.scale(weights[0] / total);
    for (m, w) in models.iter().zip(weights).skip(1) {
        acc.axpy(w / total, m.params());
    }
    let mut out = first.clone();
    out.set_params(acc)?;
    Ok(out)
}
