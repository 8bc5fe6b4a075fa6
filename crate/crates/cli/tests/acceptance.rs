//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the verdicts are always printed; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mas_cli::{cmd_sweep, run_to_dir, sha256_hex, Axis, Overrides, SweepArgs, SWEEP_HEADER};
use mas_core::affinity::{finalize_diagonal, AffinityMatrix};
use mas_core::datagen::{SizeProfile, SuiteSpec, TaskRecipe};
use mas_core::model::{merge_tasks, MultiTaskModel};
use mas_core::nn::{self, Activation, Batch, Params, SgdConfig, TrunkArch};
use mas_core::partition::{best_partition, enumerate_partitions, split_score, Partition};
use mas_core::sim::{
    client_execution, fedavg_aggregate, run, run_mas, run_mas_detailed, shuffle_stream,
    ClientDataset, ExperimentConfig, ExperimentReport, LocalTraining, Method, PhaseKey,
};
use mas_core::{LossKind, TaskId, TaskSpec};
use ndarray::{concatenate, Array2, Axis as NdAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Verdict {
    let took = start.elapsed();
    ensure(
        took < limit,
        format!(
            "{detail}; {:.1}s (limit {}s)",
            took.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn ids(n: usize) -> Vec<TaskId> {
    (0..n).map(|i| TaskId::new(format!("a{i}"))).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> AffinityMatrix {
    let scores = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    AffinityMatrix::new(ids(n), scores, 1).unwrap()
}

fn uniform_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for activation in [Activation::Tanh, Activation::Softplus, Activation::Identity] {
        for loss in [LossKind::Mse, LossKind::LogCosh] {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + activation as u64 * 10 + loss as u64);
            for _ in 0..100 {
                let input = rng.random_range(1..=4);
                let hidden: Vec<usize> = (0..rng.random_range(1..=2))
                    .map(|_| rng.random_range(1..=4))
                    .collect();
                let specs: Vec<TaskSpec> = (0..rng.random_range(1..=3))
                    .map(|t| {
                        TaskSpec::new(format!("t{t}"), rng.random_range(1..=3)).with_loss(loss)
                    })
                    .collect();
                let trunk = TrunkArch {
                    input_dim: input,
                    hidden,
                    activation,
                };
                let model = merge_tasks(&specs, &trunk, rng.random()).unwrap();
                let rows = rng.random_range(1..=5);
                let targets = specs
                    .iter()
                    .map(|s| (s.id.clone(), uniform_array(&mut rng, rows, s.out_dim)))
                    .collect();
                let batch = Batch::new(uniform_array(&mut rng, rows, input), targets).unwrap();
                let grads = nn::backward(model.arch(), model.params(), &batch)
                    .unwrap()
                    .grads;
                let loss_at = |p: &Params| -> f64 {
                    nn::task_losses(model.arch(), p, &batch)
                        .unwrap()
                        .values()
                        .sum()
                };
                let flat: Vec<f64> = grads
                    .iter()
                    .flat_map(|(_, g)| g.values().to_vec())
                    .collect();
                let mut k = 0;
                for slot in 0..=model.num_tasks() {
                    let len = grads.iter().nth(slot).unwrap().1.len();
                    for i in 0..len {
                        let shifted = |d: f64| {
                            let mut p = model.params().clone();
                            p.iter_mut().nth(slot).unwrap().1.values_mut()[i] += d;
                            loss_at(&p)
                        };
                        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                        let a = flat[k];
                        worst =
                            worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
                        k += 1;
                        checked += 1;
                    }
                }
            }
        }
    }
    if worst >= 1e-4 {
        return Err(format!("worst relative error {worst:.2e}"));
    }
    within(
        Duration::from_secs(10),
        start,
        format!("600 networks, {checked} parameters, worst relative error {worst:.2e}"),
    )
}

fn partition_counting() -> Verdict {
    let start = Instant::now();
    let c52 = enumerate_partitions(5, 2).unwrap().count();
    let c53 = enumerate_partitions(5, 3).unwrap().count();
    if (c52, c53) != (15, 25) {
        return Err(format!("got {c52} and {c53}, expected 15 and 25"));
    }
    let mut s = vec![vec![0u64; 9]; 9];
    s[0][0] = 1;
    for n in 1..=8 {
        for k in 1..=n {
            s[n][k] = k as u64 * s[n - 1][k] + s[n - 1][k - 1];
            let got = enumerate_partitions(n, k).unwrap().count() as u64;
            if got != s[n][k] {
                return Err(format!("S({n},{k}) = {} but enumerated {got}", s[n][k]));
            }
        }
    }
    within(
        Duration::from_secs(1),
        start,
        "15 and 25 for n=5; recurrence holds for n <= 8".into(),
    )
}

fn split_score_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = ids(5);
    let p = Partition::new(vec![t[0..2].to_vec(), t[2..5].to_vec()]).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = finalize_diagonal(&random_matrix(&mut rng, 5)).unwrap();
        let scored = split_score(&p, &m).unwrap();
        let expected = [
            m.get(1, 0),
            m.get(0, 1),
            (m.get(3, 2) + m.get(4, 2)) / 2.0,
            (m.get(2, 3) + m.get(4, 3)) / 2.0,
            (m.get(2, 4) + m.get(3, 4)) / 2.0,
        ];
        for (i, e) in expected.iter().enumerate() {
            worst = worst.max((scored.per_task[&t[i]] - e).abs());
        }
    }
    ensure(
        worst <= 1e-15,
        format!("100 random 5-task matrices, max deviation {worst:.1e}"),
    )
}

fn self_affinity_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let n = 2 + trial % 8;
        let raw = random_matrix(&mut rng, n);
        let m = finalize_diagonal(&raw).unwrap();
        for i in 0..n {
            let direct: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| raw.get(i, j) + raw.get(j, i))
                .sum::<f64>()
                / (2 * n - 2) as f64;
            worst = worst.max((m.get(i, i) - direct).abs());
        }
        if finalize_diagonal(&m).unwrap().scores() != m.scores() {
            return Err(format!("not idempotent for n = {n}"));
        }
    }
    ensure(
        worst <= 1e-15,
        format!("1000 matrices, n in 2..=9, max deviation {worst:.1e}, idempotent"),
    )
}

fn argmax_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut searches = 0;
    for trial in 0..100 {
        let n = 2 + trial % 6;
        let m = finalize_diagonal(&random_matrix(&mut rng, n)).unwrap();
        let shift: f64 = rng.random_range(-3.0..3.0);
        let scale: f64 = rng.random_range(0.1..10.0);
        let moved = finalize_diagonal(&m.map(|_, _, v| scale * v + shift).unwrap()).unwrap();
        for x in 1..=n {
            let a = best_partition(&m, x).unwrap().partition;
            if best_partition(&moved, x).unwrap().partition != a {
                return Err(format!("trial {trial}, n={n}, x={x}: argmax moved"));
            }
            searches += 1;
        }
    }
    ensure(
        true,
        format!("100 matrices, n <= 7, {searches} searches unchanged"),
    )
}

fn fedavg_centralization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let trunk = TrunkArch {
        input_dim: 4,
        hidden: vec![5, 3],
        activation: Activation::Tanh,
    };
    let specs = [TaskSpec::new("t0", 2), TaskSpec::new("t1", 1)];
    let model = merge_tasks(&specs, &trunk, 6).unwrap();
    let batches: Vec<Batch> = (0..5)
        .map(|_| {
            let targets = specs
                .iter()
                .map(|s| (s.id.clone(), uniform_array(&mut rng, 8, s.out_dim)))
                .collect();
            Batch::new(uniform_array(&mut rng, 8, 4), targets).unwrap()
        })
        .collect();
    let (lr, wd) = (0.1, 1e-4);
    let opts = LocalTraining {
        epochs: 1,
        rho: 0,
        lr,
        sgd: SgdConfig {
            base_lr: lr,
            momentum: 0.9,
            weight_decay: wd,
        },
        round: 1,
    };
    let mut locals = Vec::new();
    let mut sizes = Vec::new();
    for (k, b) in batches.iter().enumerate() {
        let client = ClientDataset::new(k, vec![b.clone()], vec![b.clone()]).unwrap();
        let mut shuffle = shuffle_stream(0, &PhaseKey::AllInOne, 0, k);
        locals.push(
            client_execution(&model, &client, &opts, &mut shuffle)
                .unwrap()
                .model,
        );
        sizes.push(client.size as f64);
    }
    let fed = fedavg_aggregate(&locals, &sizes).unwrap();

    let x = concatenate(
        NdAxis(0),
        &batches
            .iter()
            .map(|b| b.inputs().view())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let targets: BTreeMap<TaskId, Array2<f64>> = specs
        .iter()
        .map(|s| {
            let v: Vec<_> = batches
                .iter()
                .map(|b| b.target(&s.id).unwrap().view())
                .collect();
            (s.id.clone(), concatenate(NdAxis(0), &v).unwrap())
        })
        .collect();
    let union = Batch::new(x, targets).unwrap();
    let g = nn::backward(model.arch(), model.params(), &union)
        .unwrap()
        .grads;
    let mut worst: f64 = 0.0;
    for ((_, p0), ((_, gp), (_, fp))) in
        model.params().iter().zip(g.iter().zip(fed.params().iter()))
    {
        for ((w, d), f) in p0.values().iter().zip(gp.values()).zip(fp.values()) {
            worst = worst.max((w - lr * (d + wd * w) - f).abs());
        }
    }
    ensure(
        worst <= 1e-12,
        format!("K = N = 5, max deviation {worst:.1e}"),
    )
}

/// Two-cluster suite of the qualitative experiment.
fn two_cluster(seed: u64, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        seed,
        suite: SuiteSpec::clustered(&[3, 3], 0.9),
        clients: 8,
        select: 4,
        rounds: 60,
        r0: 20,
        score_round: 10,
        splits: 2,
        sizes: SizeProfile::Skewed {
            total: 2000,
            ratio: 4.5,
        },
        ..ExperimentConfig::default()
    }
}

fn split_continuity() -> Verdict {
    let mut splits = 0;
    for seed in 0..3 {
        let run = run_mas_detailed(&two_cluster(seed, Method::Mas)).map_err(|e| e.to_string())?;
        let merged: &MultiTaskModel = &run.merged_at_split;
        for s in &run.initial_splits {
            if !s.trunk().bit_eq(merged.trunk()) {
                return Err(format!("seed {seed}: split trunk differs"));
            }
            for t in s.tasks() {
                if !s.head(t).unwrap().bit_eq(merged.head(t).unwrap()) {
                    return Err(format!("seed {seed}: head {t} differs"));
                }
            }
            splits += 1;
        }
    }
    ensure(
        true,
        format!("{splits} splits over 3 seeds bit-equal to the merged model"),
    )
}

fn round10_affinity(tasks: Vec<TaskRecipe>, latent_dim: usize, seed: u64) -> f64 {
    let mut cfg = two_cluster(seed, Method::Mas);
    cfg.suite = SuiteSpec {
        tasks,
        latent_dim,
        ..SuiteSpec::clustered(&[1], 0.9)
    };
    cfg.rounds = 10;
    cfg.r0 = 10;
    let report = run_mas(&cfg).unwrap();
    report
        .affinity
        .iter()
        .find(|m| m.round() == 10)
        .unwrap()
        .get(0, 1)
}

fn affinity_signs() -> Verdict {
    let start = Instant::now();
    let dup = (0..10)
        .filter(|&s| {
            let tasks = vec![
                TaskRecipe::cluster("i", 0),
                TaskRecipe::mirror("j", "i", 1.0),
            ];
            round10_affinity(tasks, 2, s) > 0.0
        })
        .count();
    // j draws on a latent block orthogonal to i's and both compete for a
    // trunk bottleneck too narrow to serve them together
    let anti = (0..10)
        .filter(|&s| {
            let tasks = vec![TaskRecipe::cluster("i", 0), TaskRecipe::cluster("j", 1)];
            round10_affinity(tasks, 4, s) < 0.0
        })
        .count();
    if dup < 9 || anti < 9 {
        return Err(format!(
            "duplicate positive {dup}/10, antagonistic negative {anti}/10"
        ));
    }
    within(
        Duration::from_secs(120),
        start,
        format!("duplicate positive {dup}/10, antagonistic negative {anti}/10"),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn cluster_recovery() -> Verdict {
    let start = Instant::now();
    let runs: Vec<[ExperimentReport; 3]> = (0..10)
        .map(|seed| {
            let r = |m| run(&two_cluster(seed, m)).unwrap();
            [r(Method::Mas), r(Method::AllInOne), r(Method::OneByOne)]
        })
        .collect();
    let recovered = runs
        .iter()
        .filter(|r| r[0].recovered_ground_truth() == Some(true))
        .count();
    let med = |i: usize| median(runs.iter().map(|r| r[i].final_total_test_loss).collect());
    let (mas, all, obo) = (med(0), med(1), med(2));
    let ordered = runs
        .iter()
        .filter(|r| r[1].cost.time < r[0].cost.time && r[0].cost.time < r[2].cost.time)
        .count();
    let detail = format!(
        "ground truth {recovered}/10; median loss mas {mas:.4}, all_in_one {all:.4}, one_by_one {obo:.4}; time order {ordered}/10"
    );
    if recovered < 8 || !(mas < all && mas < obo) || ordered < 10 {
        return Err(detail);
    }
    within(Duration::from_secs(300), start, detail)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = two_cluster(7, Method::Mas);
    let mut hashes = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        run_to_dir(&cfg, None, &dir).map_err(|e| e.to_string())?;
        let bytes = fs::read(dir.join("report.json")).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        let listed = manifest["files"]["report.json"]
            .as_str()
            .unwrap()
            .to_string();
        if listed != sha256_hex(&bytes) {
            return Err("manifest hash does not match report.json".into());
        }
        hashes.push(listed);
    }
    ensure(
        hashes[0] == hashes[1],
        format!("report.json sha256 {}", &hashes[0][..16]),
    )
}

fn sweep_harness() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(
        &config,
        serde_json::to_string(&two_cluster(0, Method::Mas)).unwrap(),
    )
    .unwrap();
    let out = tmp.path().join("sweep");
    let args = SweepArgs {
        overrides: Overrides {
            config: Some(config),
            ..Overrides::default()
        },
        axis: Axis::R0,
        values: vec![10, 20, 30, 40, 50],
        methods: Vec::new(),
        out: out.clone(),
    };
    cmd_sweep(&args).map_err(|e| format!("{e:#}"))?;
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err("unexpected header".into());
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let well_formed = rows.len() == 5
        && rows.iter().all(|r| {
            r.len() == 7
                && r[0] == "r0"
                && r[4..]
                    .iter()
                    .all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
        });
    let values: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    ensure(
        well_formed && values == ["10", "20", "30", "40", "50"],
        format!(
            "{} rows, r0 = {}, all losses finite: {well_formed}",
            rows.len(),
            values.join("/")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness),
        ("partition counting", partition_counting),
        ("split-score exactness", split_score_exactness),
        ("self-affinity exactness", self_affinity_exactness),
        ("argmax invariances", argmax_invariance),
        ("fedavg centralization equivalence", fedavg_centralization),
        ("split-boundary continuity", split_continuity),
        ("affinity sign test", affinity_signs),
        ("cluster recovery and loss improvement", cluster_recovery),
        ("determinism", determinism),
        ("sweep harness", sweep_harness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
