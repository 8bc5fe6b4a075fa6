use std::collections::BTreeMap;

use rayon::prelude::*;

use super::client::{client_execution, ClientUpdate, LocalTraining};
use super::config::{ExperimentConfig, Method};
use super::cost::{cost_model, Job, RoundTrace, StageTrace, TrainingTrace};
use super::eval::evaluate;
use super::report::{
    ClientLossSummary, ExperimentReport, PartitionReport, Phase, RoundRecord, TaskRunReport,
};
use super::server::{fedavg_aggregate, select_clients, selection_stream, shuffle_stream, PhaseKey};
use crate::affinity::{
    finalize_diagonal, server_aggregate, server_aggregate_weighted, AffinityMatrix,
};
use crate::datagen::{gen_suite, import_clients, partition_clients, ClientDataset};
use crate::error::{Error, Result};
use crate::model::{merge_tasks, reconstruct, MultiTaskModel};
use crate::nn::poly_lr;
use crate::partition::{best_partition_with, Partition, PartitionSearch};
use crate::task::{TaskId, TaskSpec};

/// Client data and task list of a run.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub task_specs: Vec<TaskSpec>,
    pub clients: Vec<ClientDataset>,
    pub ground_truth: Option<Partition>,
}

/// Generates the suite and client data from the config seed, or loads a
/// frozen export when `data_dir` is set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    if let Some(dir) = &cfg.data_dir {
        let (manifest, clients) = import_clients(dir)?;
        if manifest.suite.input_dim != cfg.suite.input_dim {
            return Err(Error::config(
                "data_dir",
                format!(
                    "exported inputs have {} dims, config suite has {}",
                    manifest.suite.input_dim, cfg.suite.input_dim
                ),
            ));
        }
        let task_specs = manifest
            .out_dims
            .iter()
            .map(|(t, &o)| TaskSpec::new(t.clone(), o))
            .collect();
        let mut blocks: BTreeMap<usize, Vec<TaskId>> = BTreeMap::new();
        for (t, &c) in &manifest.clustering {
            blocks.entry(c).or_default().push(t.clone());
        }
        let ground_truth = Partition::new(blocks.into_values().collect()).ok();
        return Ok(PreparedData {
            task_specs,
            clients,
            ground_truth,
        });
    }
    let suite = gen_suite(&cfg.suite, cfg.seed)?;
    let clients = partition_clients(&suite, &cfg.client_layout(), cfg.seed)?;
    Ok(PreparedData {
        task_specs: suite.task_specs.clone(),
        ground_truth: Some(suite.ground_truth()),
        clients,
    })
}

/// A stretch of consecutive federated rounds on one model.
struct PhasePlan<'a> {
    key: PhaseKey,
    phase: Phase,
    split_id: Option<usize>,
    /// Global 0-based index of the first round.
    start: usize,
    rounds: usize,
    rho: usize,
    pool: &'a [usize],
}

struct PhaseOutcome {
    model: MultiTaskModel,
    records: Vec<RoundRecord>,
    affinity: Vec<AffinityMatrix>,
    trace: Vec<RoundTrace>,
}

fn job(update: &ClientUpdate, epochs: usize) -> Job {
    Job {
        client: update.client,
        trunk_params: update.model.trunk_param_count(),
        head_params: update.model.head_param_count(),
        tasks: update.model.num_tasks(),
        batches: update.batches,
        epochs,
        affinity_samples: update.affinity_samples,
    }
}

fn weighted_train_losses(updates: &[ClientUpdate]) -> BTreeMap<TaskId, f64> {
    let total: f64 = updates.iter().map(|u| u.size as f64).sum();
    let mut out: BTreeMap<TaskId, f64> = BTreeMap::new();
    for u in updates {
        for (t, l) in &u.train_losses {
            *out.entry(t.clone()).or_insert(0.0) += u.size as f64 / total * l;
        }
    }
    out
}

fn train_phase(
    cfg: &ExperimentConfig,
    clients: &[ClientDataset],
    mut model: MultiTaskModel,
    plan: &PhasePlan,
) -> Result<PhaseOutcome> {
    let mut out = PhaseOutcome {
        model: model.clone(),
        records: Vec::new(),
        affinity: Vec::new(),
        trace: Vec::new(),
    };
    let k = cfg.select.min(plan.pool.len());
    for g in plan.start..plan.start + plan.rounds {
        let opts = LocalTraining {
            epochs: cfg.epochs,
            rho: plan.rho,
            lr: poly_lr(g, cfg.rounds, cfg.lr)?,
            sgd: cfg.sgd(),
            round: g + 1,
        };
        let selected = select_clients(&mut selection_stream(cfg.seed, &plan.key, g), plan.pool, k)?;
        let updates: Vec<ClientUpdate> = selected
            .par_iter()
            .map(|&c| {
                let mut rng = shuffle_stream(cfg.seed, &plan.key, g, c);
                client_execution(&model, &clients[c], &opts, &mut rng)
            })
            .collect::<Result<_>>()?;

        let weights: Vec<f64> = updates.iter().map(|u| u.size as f64).collect();
        let locals: Vec<MultiTaskModel> = updates.iter().map(|u| u.model.clone()).collect();
        model = fedavg_aggregate(&locals, &weights)?;

        let measured: Vec<(&AffinityMatrix, f64)> = updates
            .iter()
            .filter_map(|u| u.affinity.as_ref().map(|a| (a, u.size as f64)))
            .collect();
        if !measured.is_empty() {
            let mats: Vec<AffinityMatrix> = measured.iter().map(|(a, _)| (*a).clone()).collect();
            let agg = if cfg.weighted_affinity {
                let w: Vec<f64> = measured.iter().map(|(_, w)| *w).collect();
                server_aggregate_weighted(&mats, &w)?
            } else {
                server_aggregate(&mats)?
            };
            out.affinity.push(agg);
        }

        let train = weighted_train_losses(&updates);
        let test = evaluate(&[&model], clients)?;
        for (t, l) in &test.per_task {
            out.records.push(RoundRecord {
                round: g + 1,
                phase: plan.phase,
                task: t.clone(),
                split_id: plan.split_id,
                train_loss: train[t],
                test_loss: *l,
            });
        }
        out.trace.push(RoundTrace {
            jobs: updates.iter().map(|u| job(u, cfg.epochs)).collect(),
        });
    }
    out.model = model;
    Ok(out)
}

fn base_report(cfg: &ExperimentConfig, data: &PreparedData) -> ExperimentReport {
    ExperimentReport {
        method: cfg.method,
        seed: cfg.seed,
        config: cfg.clone(),
        rounds: Vec::new(),
        final_test_losses: BTreeMap::new(),
        final_total_test_loss: 0.0,
        partition: None,
        ground_truth: data.ground_truth.clone(),
        affinity: Vec::new(),
        cost: Default::default(),
        task_runs: Vec::new(),
        standalone_clients: Vec::new(),
    }
}

fn set_final(report: &mut ExperimentReport, losses: BTreeMap<TaskId, f64>) {
    report.final_total_test_loss = losses.values().sum();
    report.final_test_losses = losses;
}

/// A merge-and-split run with the intermediate models kept.
#[derive(Clone, Debug)]
pub struct MasRun {
    pub report: ExperimentReport,
    /// The all-in-one model after `r0` rounds.
    pub merged_at_split: MultiTaskModel,
    /// Split models before any split-phase training.
    pub initial_splits: Vec<MultiTaskModel>,
    /// Split models after the last round.
    pub final_models: Vec<MultiTaskModel>,
}

pub fn run_mas(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_mas_detailed(cfg)?.report)
}

/// Merge, train all-in-one for `r0` rounds while measuring affinity, split
/// by the best partition of the `score_round` matrix, then train each split
/// for the remaining rounds from the merged parameters.
pub fn run_mas_detailed(cfg: &ExperimentConfig) -> Result<MasRun> {
    let mut cfg = cfg.clone();
    cfg.method = Method::Mas;
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let all: Vec<usize> = (0..data.clients.len()).collect();
    let model = merge_tasks(&data.task_specs, &cfg.trunk_arch(), cfg.seed)?;
    let mut report = base_report(&cfg, &data);
    let mut trace = TrainingTrace::default();

    let merged = train_phase(
        &cfg,
        &data.clients,
        model,
        &PhasePlan {
            key: PhaseKey::AllInOne,
            phase: Phase::AllInOne,
            split_id: None,
            start: 0,
            rounds: cfg.r0,
            rho: cfg.rho,
            pool: &all,
        },
    )?;
    report.rounds = merged.records;
    report.affinity = merged.affinity;
    trace.stages.push(StageTrace {
        name: "all_in_one".into(),
        parallel_group: None,
        rounds: merged.trace,
    });

    let raw = report
        .affinity
        .iter()
        .find(|m| m.round() == cfg.score_round)
        .ok_or(Error::NoMeasurement(cfg.score_round))?;
    let matrix = finalize_diagonal(raw)?;
    let search = PartitionSearch {
        max_tasks: cfg.max_partition_tasks,
        at_most: cfg.splits_at_most,
    };
    let best = best_partition_with(&matrix, cfg.splits, search)?;
    let initial_splits = merged.model.split(&best.partition)?;
    report.partition = Some(PartitionReport {
        score_round: cfg.score_round,
        partition: best.partition.clone(),
        per_task: best.per_task,
        total: best.total,
        matrix,
    });

    let x = initial_splits.len();
    let mut final_models = Vec::with_capacity(x);
    for (j, split) in initial_splits.iter().enumerate() {
        let pool: Vec<usize> = if cfg.disjoint_split_pools {
            all.iter().copied().filter(|c| c % x == j).collect()
        } else {
            all.clone()
        };
        if pool.is_empty() {
            return Err(Error::config(
                "disjoint_split_pools",
                format!("split {j} has no clients"),
            ));
        }
        let out = train_phase(
            &cfg,
            &data.clients,
            split.clone(),
            &PhasePlan {
                key: PhaseKey::Split(j),
                phase: Phase::Split,
                split_id: Some(j),
                start: cfg.r0,
                rounds: cfg.rounds - cfg.r0,
                rho: 0,
                pool: &pool,
            },
        )?;
        report.rounds.extend(out.records);
        trace.stages.push(StageTrace {
            name: format!("split_{j}"),
            parallel_group: cfg.disjoint_split_pools.then_some(0),
            rounds: out.trace,
        });
        final_models.push(out.model);
    }
    report.rounds.sort_by_key(|r| r.round);

    reconstruct(&final_models)?;
    let refs: Vec<&MultiTaskModel> = final_models.iter().collect();
    set_final(&mut report, evaluate(&refs, &data.clients)?.per_task);
    report.cost = cost_model(&trace, &cfg.cost);
    Ok(MasRun {
        report,
        merged_at_split: merged.model,
        initial_splits,
        final_models,
    })
}

fn run_all_in_one(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentReport> {
    let all: Vec<usize> = (0..data.clients.len()).collect();
    let model = merge_tasks(&data.task_specs, &cfg.trunk_arch(), cfg.seed)?;
    let out = train_phase(
        cfg,
        &data.clients,
        model,
        &PhasePlan {
            key: PhaseKey::AllInOne,
            phase: Phase::AllInOne,
            split_id: None,
            start: 0,
            rounds: cfg.rounds,
            rho: 0,
            pool: &all,
        },
    )?;
    let mut report = base_report(cfg, data);
    report.rounds = out.records;
    set_final(
        &mut report,
        evaluate(&[&out.model], &data.clients)?.per_task,
    );
    report.cost = cost_model(
        &TrainingTrace {
            stages: vec![StageTrace {
                name: "all_in_one".into(),
                parallel_group: None,
                rounds: out.trace,
            }],
        },
        &cfg.cost,
    );
    Ok(report)
}

fn run_one_by_one(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentReport> {
    let all: Vec<usize> = (0..data.clients.len()).collect();
    let mut report = base_report(cfg, data);
    let mut trace = TrainingTrace::default();
    let mut finals = BTreeMap::new();
    for spec in &data.task_specs {
        let model = merge_tasks(std::slice::from_ref(spec), &cfg.trunk_arch(), cfg.seed)?;
        let out = train_phase(
            cfg,
            &data.clients,
            model,
            &PhasePlan {
                key: PhaseKey::OneByOne(spec.id.clone()),
                phase: Phase::OneByOne,
                split_id: None,
                start: 0,
                rounds: cfg.rounds,
                rho: 0,
                pool: &all,
            },
        )?;
        let loss = evaluate(&[&out.model], &data.clients)?.total;
        finals.insert(spec.id.clone(), loss);
        report.rounds.extend(out.records);
        let stage = StageTrace {
            name: format!("task_{}", spec.id),
            parallel_group: None,
            rounds: out.trace,
        };
        let stage_cost = cost_model(
            &TrainingTrace {
                stages: vec![stage.clone()],
            },
            &cfg.cost,
        );
        report.task_runs.push(TaskRunReport {
            task: spec.id.clone(),
            final_test_loss: loss,
            rounds: cfg.rounds,
            cost: stage_cost.stages.into_iter().next().unwrap(),
        });
        trace.stages.push(stage);
    }
    set_final(&mut report, finals);
    report.cost = cost_model(&trace, &cfg.cost);
    Ok(report)
}

/// Every client trains its own all-in-one model for `rounds` rounds with
/// no aggregation. Shuffle streams are those of the all-in-one phase, so a
/// single client reproduces a one-client federated run.
fn run_standalone(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentReport> {
    let init = merge_tasks(&data.task_specs, &cfg.trunk_arch(), cfg.seed)?;
    let n = data.clients.len() as f64;
    let mut models: Vec<MultiTaskModel> = vec![init; data.clients.len()];
    let mut report = base_report(cfg, data);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut last_tests = Vec::new();
    for g in 0..cfg.rounds {
        let opts = LocalTraining {
            epochs: cfg.epochs,
            rho: 0,
            lr: poly_lr(g, cfg.rounds, cfg.lr)?,
            sgd: cfg.sgd(),
            round: g + 1,
        };
        let results: Vec<(ClientUpdate, BTreeMap<TaskId, f64>)> = models
            .par_iter()
            .zip(data.clients.par_iter())
            .enumerate()
            .map(|(c, (m, d))| {
                let mut rng = shuffle_stream(cfg.seed, &PhaseKey::AllInOne, g, c);
                let u = client_execution(m, d, &opts, &mut rng)?;
                let test = evaluate(&[&u.model], &data.clients)?.per_task;
                Ok((u, test))
            })
            .collect::<Result<_>>()?;

        let mut train: BTreeMap<TaskId, f64> = BTreeMap::new();
        let mut test: BTreeMap<TaskId, f64> = BTreeMap::new();
        for (u, t) in &results {
            for (task, l) in &u.train_losses {
                *train.entry(task.clone()).or_insert(0.0) += l / n;
            }
            for (task, l) in t {
                *test.entry(task.clone()).or_insert(0.0) += l / n;
            }
        }
        for (t, l) in &test {
            report.rounds.push(RoundRecord {
                round: g + 1,
                phase: Phase::Standalone,
                task: t.clone(),
                split_id: None,
                train_loss: train[t],
                test_loss: *l,
            });
        }
        rounds.push(RoundTrace {
            jobs: results.iter().map(|(u, _)| job(u, cfg.epochs)).collect(),
        });
        last_tests = results.iter().map(|(_, t)| t.clone()).collect();
        models = results.into_iter().map(|(u, _)| u.model).collect();
    }

    report.standalone_clients = last_tests
        .iter()
        .enumerate()
        .map(|(c, per_task)| ClientLossSummary {
            client: data.clients[c].id,
            total: per_task.values().sum(),
            per_task: per_task.clone(),
        })
        .collect();
    let mut finals: BTreeMap<TaskId, f64> = BTreeMap::new();
    for per_task in &last_tests {
        for (t, l) in per_task {
            *finals.entry(t.clone()).or_insert(0.0) += l / n;
        }
    }
    set_final(&mut report, finals);
    report.cost = cost_model(
        &TrainingTrace {
            stages: vec![StageTrace {
                name: "standalone".into(),
                parallel_group: None,
                rounds,
            }],
        },
        &cfg.cost,
    );
    Ok(report)
}

/// Runs one of the baselines named by `cfg.method`.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    match cfg.method {
        Method::AllInOne => run_all_in_one(cfg, &data),
        Method::OneByOne => run_one_by_one(cfg, &data),
        Method::Standalone => run_standalone(cfg, &data),
        Method::Mas => Err(Error::config("method", "mas is not a baseline")),
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.method {
        Method::Mas => run_mas(cfg),
        _ => run_baseline(cfg),
    }
}
