//! End-to-end properties of the federated pipelines.

use std::collections::BTreeMap;

use mas_core::datagen::{SizeProfile, SuiteSpec};
use mas_core::model::{merge_tasks, MultiTaskModel};
use mas_core::nn::{self, Activation, Batch, SgdConfig, TrunkArch};
use mas_core::sim::{
    client_execution, evaluate, evaluate_per_client, fedavg_aggregate, prepare_data, run,
    run_baseline, run_mas, run_mas_detailed, select_clients, selection_stream, shuffle_stream,
    ClientDataset, ExperimentConfig, LocalTraining, Method, PhaseKey,
};
use mas_core::{TaskId, TaskSpec};
use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        seed: 11,
        suite: SuiteSpec::clustered(&[2, 2], 0.9),
        clients: 4,
        select: 2,
        rounds: 6,
        r0: 3,
        score_round: 2,
        splits: 2,
        batch_size: 8,
        sizes: SizeProfile::Uniform { per_client: 50 },
        ..ExperimentConfig::default()
    }
}

fn tiny_model(seed: u64) -> MultiTaskModel {
    let trunk = TrunkArch {
        input_dim: 3,
        hidden: vec![4],
        activation: Activation::Tanh,
    };
    merge_tasks(
        &[TaskSpec::new("a", 2), TaskSpec::new("b", 1)],
        &trunk,
        seed,
    )
    .unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize) -> Batch {
    let mut m = |c: usize| Array2::from_shape_simple_fn((rows, c), || rng.random_range(-1.0..1.0));
    let x = m(3);
    let targets = [(TaskId::from("a"), m(2)), (TaskId::from("b"), m(1))]
        .into_iter()
        .collect();
    Batch::new(x, targets).unwrap()
}

#[test]
fn fedavg_of_full_batch_steps_is_a_centralized_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = tiny_model(2);
    let batches: Vec<Batch> = (0..4).map(|_| random_batch(&mut rng, 6)).collect();
    let clients: Vec<ClientDataset> = batches
        .iter()
        .enumerate()
        .map(|(k, b)| ClientDataset::new(k, vec![b.clone()], vec![b.clone()]).unwrap())
        .collect();
    let sgd = SgdConfig {
        base_lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-3,
    };
    let opts = LocalTraining {
        epochs: 1,
        rho: 0,
        lr: 0.05,
        sgd,
        round: 1,
    };
    let updates: Vec<MultiTaskModel> = clients
        .iter()
        .map(|c| {
            let mut rng = shuffle_stream(0, &PhaseKey::AllInOne, 0, c.id);
            client_execution(&model, c, &opts, &mut rng).unwrap().model
        })
        .collect();
    let sizes: Vec<f64> = clients.iter().map(|c| c.size as f64).collect();
    let averaged = fedavg_aggregate(&updates, &sizes).unwrap();

    // one step on the union of all client data, written out by hand
    let x = concatenate(
        Axis(0),
        &batches
            .iter()
            .map(|b| b.inputs().view())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let targets: BTreeMap<TaskId, Array2<f64>> = ["a", "b"]
        .into_iter()
        .map(|t| {
            let t = TaskId::from(t);
            let views: Vec<_> = batches
                .iter()
                .map(|b| b.target(&t).unwrap().view())
                .collect();
            (t, concatenate(Axis(0), &views).unwrap())
        })
        .collect();
    let union = Batch::new(x, targets).unwrap();
    let grads = nn::backward(model.arch(), model.params(), &union)
        .unwrap()
        .grads;
    let mut expected = model.params().clone();
    for ((_, p), (_, g)) in expected.iter_mut().zip(grads.iter()) {
        for (w, d) in p.values_mut().iter_mut().zip(g.values()) {
            *w -= 0.05 * (d + 1e-3 * *w);
        }
    }
    for ((_, a), (_, b)) in averaged.params().iter().zip(expected.iter()) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn affinity_sample_count_follows_rho() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = tiny_model(1);
    let train: Vec<Batch> = (0..20).map(|_| random_batch(&mut rng, 4)).collect();
    let client = ClientDataset::new(0, train, vec![random_batch(&mut rng, 4)]).unwrap();
    let mut opts = LocalTraining {
        epochs: 1,
        rho: 5,
        lr: 0.01,
        sgd: SgdConfig::default(),
        round: 1,
    };
    let mut shuffle = shuffle_stream(0, &PhaseKey::AllInOne, 0, 0);
    let up = client_execution(&model, &client, &opts, &mut shuffle).unwrap();
    assert_eq!(up.affinity_samples, 4);
    assert!(up.affinity.is_some());

    opts.rho = 0;
    let up = client_execution(&model, &client, &opts, &mut shuffle).unwrap();
    assert_eq!(up.affinity_samples, 0);
    assert!(up.affinity.is_none());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = tiny_model(4);
    let batch = random_batch(&mut rng, 5);
    let client = ClientDataset::new(0, vec![batch.clone(); 10], vec![batch]).unwrap();
    let opts = LocalTraining {
        epochs: 1,
        rho: 1,
        lr: 0.0,
        sgd: SgdConfig::default(),
        round: 1,
    };
    let up = client_execution(
        &model,
        &client,
        &opts,
        &mut shuffle_stream(0, &PhaseKey::AllInOne, 0, 0),
    )
    .unwrap();
    assert!(up.model.params().bit_eq(model.params()));
    let m = up.affinity.unwrap();
    assert!(m.scores().iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn selection_streams_are_counter_derived() {
    use mas_core::rng::{self, tag};
    use rand::seq::index;
    let pool: Vec<usize> = (0..32).collect();
    for round in 0..5 {
        let got = select_clients(
            &mut selection_stream(7, &PhaseKey::AllInOne, round),
            &pool,
            4,
        )
        .unwrap();
        let mut oracle: Vec<usize> =
            index::sample(&mut rng::stream(7, &[tag::SELECT, 1, round as u64]), 32, 4).into_vec();
        oracle.sort_unstable();
        assert_eq!(got, oracle);
    }
    let a = select_clients(&mut selection_stream(7, &PhaseKey::AllInOne, 0), &pool, 4).unwrap();
    let b = select_clients(&mut selection_stream(7, &PhaseKey::AllInOne, 1), &pool, 4).unwrap();
    assert_ne!(a, b);
}

#[test]
fn pooled_loss_is_the_size_weighted_mean_of_client_losses() {
    let cfg = small_config(Method::AllInOne);
    let data = prepare_data(&cfg).unwrap();
    let model = merge_tasks(&data.task_specs, &cfg.trunk_arch(), 3).unwrap();
    let pooled = evaluate(&[&model], &data.clients).unwrap();
    let per_client = evaluate_per_client(&[&model], &data.clients).unwrap();
    let rows: usize = per_client.iter().map(|(_, n, _)| n).sum();
    for (t, &l) in &pooled.per_task {
        let weighted: f64 = per_client
            .iter()
            .map(|(_, n, c)| *n as f64 * c.per_task[t])
            .sum::<f64>()
            / rows as f64;
        assert!((l - weighted).abs() < 1e-12);
    }
    let sum: f64 = pooled.per_task.values().sum();
    assert_eq!(pooled.total, sum);
}

#[test]
fn splits_start_from_the_merged_parameters() {
    let run = run_mas_detailed(&small_config(Method::Mas)).unwrap();
    let merged = &run.merged_at_split;
    let mut covered = 0;
    for split in &run.initial_splits {
        assert!(split.trunk().bit_eq(merged.trunk()));
        for t in split.tasks() {
            assert!(split.head(t).unwrap().bit_eq(merged.head(t).unwrap()));
            covered += 1;
        }
    }
    assert_eq!(covered, merged.num_tasks());
    let report = &run.report;
    let sum: f64 = report.final_test_losses.values().sum();
    assert_eq!(report.final_total_test_loss, sum);
    assert_eq!(report.partition.as_ref().unwrap().partition.len(), 2);
}

#[test]
fn all_rounds_merged_is_all_in_one() {
    let mut mas = small_config(Method::Mas);
    mas.r0 = mas.rounds;
    let a = run_mas(&mas).unwrap();
    let b = run_baseline(&small_config(Method::AllInOne)).unwrap();
    assert_eq!(a.final_test_losses, b.final_test_losses);
    let test_a: Vec<f64> = a.rounds.iter().map(|r| r.test_loss).collect();
    let test_b: Vec<f64> = b.rounds.iter().map(|r| r.test_loss).collect();
    assert_eq!(test_a, test_b);
}

#[test]
fn one_client_standalone_is_one_client_federated() {
    let mut cfg = small_config(Method::Standalone);
    cfg.clients = 1;
    cfg.select = 1;
    let solo = run_baseline(&cfg).unwrap();
    cfg.method = Method::AllInOne;
    let fed = run_baseline(&cfg).unwrap();
    let pairs: Vec<(f64, f64)> = solo
        .rounds
        .iter()
        .map(|r| (r.train_loss, r.test_loss))
        .collect();
    let fed_pairs: Vec<(f64, f64)> = fed
        .rounds
        .iter()
        .map(|r| (r.train_loss, r.test_loss))
        .collect();
    assert_eq!(pairs, fed_pairs);
    assert_eq!(solo.standalone_clients.len(), 1);
}

#[test]
fn one_by_one_reports_every_task_and_adds_up_time() {
    let report = run_baseline(&small_config(Method::OneByOne)).unwrap();
    assert_eq!(report.task_runs.len(), 4);
    let stage_time: f64 = report.task_runs.iter().map(|r| r.cost.time).sum();
    assert!((report.cost.time - stage_time).abs() < 1e-12 * stage_time);
}

#[test]
fn time_proxies_are_ordered() {
    for seed in 0..3 {
        let cfg = |m| ExperimentConfig {
            seed,
            ..small_config(m)
        };
        let all = run(&cfg(Method::AllInOne)).unwrap().cost.time;
        let mas = run(&cfg(Method::Mas)).unwrap().cost.time;
        let obo = run(&cfg(Method::OneByOne)).unwrap().cost.time;
        assert!(all <= mas && mas <= obo, "{all} {mas} {obo}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = small_config(Method::Mas);
    let json = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&cfg).unwrap().to_json().unwrap())
    };
    assert_eq!(json(1), json(4));
}

#[test]
fn missing_score_round_is_reported() {
    let mut cfg = small_config(Method::Mas);
    // one batch per client and rho = 2: nothing is ever measured
    cfg.batch_size = 64;
    cfg.rho = 2;
    assert!(matches!(run(&cfg), Err(mas_core::Error::NoMeasurement(2))));
}
