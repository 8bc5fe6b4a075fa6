//! Analytic time and energy proxies.
//!
//! A local training job costs `unit * (trunk + active heads) * batches *
//! epochs`. Each affinity sample adds `n + 1` forward passes over the whole
//! model and one trunk-gradient pass through the trunk and an average head.
//! A forward pass costs `forward_fraction` of a training step.
//!
//! Clients of a round run in parallel, so a round takes as long as its most
//! expensive job. Stages run one after another unless they share a
//! `parallel_group`, in which case the group takes as long as its slowest
//! stage. Energy is the sum over all jobs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub unit: f64,
    pub forward_fraction: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            unit: 1e-6,
            forward_fraction: 1.0 / 3.0,
        }
    }
}

/// One client's local work in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub client: usize,
    pub trunk_params: usize,
    pub head_params: usize,
    pub tasks: usize,
    pub batches: usize,
    pub epochs: usize,
    pub affinity_samples: usize,
}

impl Job {
    pub fn training_cost(&self, p: &CostParams) -> f64 {
        p.unit * (self.trunk_params + self.head_params) as f64 * (self.batches * self.epochs) as f64
    }

    pub fn affinity_cost(&self, p: &CostParams) -> f64 {
        if self.affinity_samples == 0 || self.tasks == 0 {
            return 0.0;
        }
        let n = self.tasks as f64;
        let all = (self.trunk_params + self.head_params) as f64;
        let one_head = self.trunk_params as f64 + self.head_params as f64 / n;
        let per_sample = (n + 1.0) * p.forward_fraction * all + one_head;
        p.unit * per_sample * self.affinity_samples as f64
    }

    pub fn cost(&self, p: &CostParams) -> f64 {
        self.training_cost(p) + self.affinity_cost(p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub jobs: Vec<Job>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub name: String,
    pub parallel_group: Option<usize>,
    pub rounds: Vec<RoundTrace>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub stages: Vec<StageTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub name: String,
    pub time: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    pub time: f64,
    pub energy: f64,
}

pub fn cost_model(trace: &TrainingTrace, params: &CostParams) -> CostReport {
    let mut stages = Vec::with_capacity(trace.stages.len());
    let mut time = 0.0;
    let mut groups: BTreeMap<usize, f64> = BTreeMap::new();
    let mut energy = 0.0;
    for stage in &trace.stages {
        let mut t = 0.0;
        let mut e = 0.0;
        for round in &stage.rounds {
            let costs = round.jobs.iter().map(|j| j.cost(params));
            t += costs.clone().fold(0.0, f64::max);
            e += costs.sum::<f64>();
        }
        match stage.parallel_group {
            Some(g) => {
                let slot = groups.entry(g).or_insert(0.0);
                *slot = slot.max(t);
            }
            None => time += t,
        }
        energy += e;
        stages.push(StageCost {
            name: stage.name.clone(),
            time: t,
            energy: e,
        });
    }
    time += groups.values().sum::<f64>();
    CostReport {
        stages,
        time,
        energy,
    }
}
