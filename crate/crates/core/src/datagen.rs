//! Synthetic multi-task regression suites with a known task clustering.
//!
//! Inputs `x` are Gaussian with a per-client mean offset. A fixed
//! orthonormal projection maps them to a latent vector `z = P x`, whose
//! coordinates are divided into one block per cluster. A task reads only its
//! cluster's block through a linear map, so tasks in different clusters use
//! orthogonal maps. Inside a cluster every task map is a convex mix of a
//! shared cluster map and an independent one, weighted by `relatedness`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::partition::Partition;
use crate::rng::{self, tag, StreamRng};
use crate::task::{TaskId, TaskSpec};

/// How a task's targets are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSource {
    /// Map drawn around the shared map of `cluster`.
    Cluster { cluster: usize },
    /// Exactly `sign` times the targets of another task, noise included.
    Mirror { of: TaskId, sign: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecipe {
    pub id: TaskId,
    #[serde(flatten)]
    pub source: TaskSource,
}

impl TaskRecipe {
    pub fn cluster(id: impl Into<TaskId>, cluster: usize) -> Self {
        TaskRecipe {
            id: id.into(),
            source: TaskSource::Cluster { cluster },
        }
    }

    pub fn mirror(id: impl Into<TaskId>, of: impl Into<TaskId>, sign: f64) -> Self {
        TaskRecipe {
            id: id.into(),
            source: TaskSource::Mirror {
                of: of.into(),
                sign,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub tasks: Vec<TaskRecipe>,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub out_dim: usize,
    /// 1 gives identical maps inside a cluster, 0 independent ones.
    pub relatedness: f64,
    pub noise_std: f64,
    /// Std of the per-client input mean offsets.
    #[serde(default)]
    pub feature_shift: f64,
}

impl SuiteSpec {
    /// `clusters[c]` tasks in cluster `c`, named `t0, t1, ...`.
    pub fn clustered(clusters: &[usize], relatedness: f64) -> Self {
        let mut tasks = Vec::new();
        for (c, &count) in clusters.iter().enumerate() {
            for _ in 0..count {
                let id = format!("t{}", tasks.len());
                tasks.push(TaskRecipe::cluster(id.as_str(), c));
            }
        }
        SuiteSpec {
            tasks,
            input_dim: 8,
            latent_dim: 2 * clusters.len(),
            out_dim: 2,
            relatedness,
            noise_std: 0.1,
            feature_shift: 0.3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config(
                "suite.tasks",
                "at least one task is required",
            ));
        }
        if self.input_dim == 0 || self.latent_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("suite", "dimensions must be positive"));
        }
        if self.latent_dim > self.input_dim {
            return Err(Error::config(
                "suite.latent_dim",
                format!(
                    "latent dim {} exceeds input dim {}",
                    self.latent_dim, self.input_dim
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::config("suite.relatedness", "must lie in [0, 1]"));
        }
        if [self.noise_std, self.feature_shift]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err(Error::config(
                "suite",
                "noise_std and feature_shift must be >= 0",
            ));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.id.clone()) {
                return Err(Error::DuplicateTask(t.id.clone()));
            }
        }
        Ok(())
    }
}

/// Generated task maps plus the ground-truth clustering.
#[derive(Clone, Debug)]
pub struct Suite {
    pub spec: SuiteSpec,
    pub task_specs: Vec<TaskSpec>,
    pub clustering: BTreeMap<TaskId, usize>,
    projection: Array2<f64>,
    /// `(cluster latent range, map)` for every clustered task.
    maps: BTreeMap<TaskId, (std::ops::Range<usize>, Array2<f64>)>,
}

fn gaussian(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

/// Rows of a Gaussian matrix, Gram-Schmidt orthonormalized.
fn orthonormal_rows(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = gaussian(rng, rows, cols);
    for i in 0..rows {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

/// Builds the task maps for `spec`.
pub fn gen_suite(spec: &SuiteSpec, seed: u64) -> Result<Suite> {
    spec.validate()?;
    let mut clustering = BTreeMap::new();
    for t in &spec.tasks {
        if let TaskSource::Cluster { cluster } = t.source {
            clustering.insert(t.id.clone(), cluster);
        }
    }
    for t in &spec.tasks {
        if let TaskSource::Mirror { of, .. } = &t.source {
            let c = *clustering.get(of).ok_or_else(|| {
                Error::config(
                    "suite.tasks",
                    format!("task {} mirrors unknown or mirrored task {of}", t.id),
                )
            })?;
            clustering.insert(t.id.clone(), c);
        }
    }
    let clusters: BTreeSet<usize> = clustering.values().copied().collect();
    let k = clusters.len();
    if spec.latent_dim < k {
        return Err(Error::config(
            "suite.latent_dim",
            format!("{k} clusters need at least {k} latent dims"),
        ));
    }

    let mut rng = rng::stream(seed, &[tag::SUITE, 0]);
    let projection = orthonormal_rows(&mut rng, spec.latent_dim, spec.input_dim);

    // latent coordinates split into contiguous blocks, one per cluster
    let mut ranges = BTreeMap::new();
    let mut start = 0;
    for (idx, &c) in clusters.iter().enumerate() {
        let width = spec.latent_dim / k + usize::from(idx < spec.latent_dim % k);
        ranges.insert(c, start..start + width);
        start += width;
    }

    let mut maps = BTreeMap::new();
    for &c in &clusters {
        let range = ranges[&c].clone();
        let width = range.len();
        let scale = 1.0 / (width as f64).sqrt();
        let mut crng = rng::stream(seed, &[tag::SUITE, 1, c as u64]);
        let shared = gaussian(&mut crng, spec.out_dim, width) * scale;
        for t in &spec.tasks {
            if t.source != (TaskSource::Cluster { cluster: c }) {
                continue;
            }
            let mut trng = rng::stream(seed, &[tag::SUITE, 2, rng::hash_str(t.id.as_str())]);
            let own = gaussian(&mut trng, spec.out_dim, width) * scale;
            let map = &shared * spec.relatedness + &own * (1.0 - spec.relatedness);
            maps.insert(t.id.clone(), (range.clone(), map));
        }
    }

    let task_specs = spec
        .tasks
        .iter()
        .map(|t| TaskSpec::new(t.id.clone(), spec.out_dim))
        .collect();

    Ok(Suite {
        spec: spec.clone(),
        task_specs,
        clustering,
        projection,
        maps,
    })
}

impl Suite {
    pub fn task_ids(&self) -> Vec<TaskId> {
        self.clustering.keys().cloned().collect()
    }

    /// Ground-truth grouping of tasks by cluster.
    pub fn ground_truth(&self) -> Partition {
        let mut blocks: BTreeMap<usize, Vec<TaskId>> = BTreeMap::new();
        for (t, &c) in &self.clustering {
            blocks.entry(c).or_default().push(t.clone());
        }
        Partition::new(blocks.into_values().collect()).expect("clusters are disjoint")
    }

    pub fn task_map(&self, task: &TaskId) -> Option<&Array2<f64>> {
        self.maps.get(task).map(|(_, m)| m)
    }

    /// Noise-free targets of a clustered task for `inputs`.
    pub fn clean_targets(&self, task: &TaskId, inputs: &Array2<f64>) -> Option<Array2<f64>> {
        let (range, map) = self.maps.get(task)?;
        let latent = inputs.dot(&self.projection.slice(s![range.clone(), ..]).t());
        Some(latent.dot(&map.t()))
    }

    /// Draws `rows` samples with input mean `offset`.
    pub fn sample(
        &self,
        rng: &mut StreamRng,
        rows: usize,
        offset: &Array1<f64>,
    ) -> (Array2<f64>, BTreeMap<TaskId, Array2<f64>>) {
        let inputs = gaussian(rng, rows, self.spec.input_dim) + offset;
        let mut targets = BTreeMap::new();
        // clustered tasks first, in task-id order; mirrors copy afterwards
        for t in self.maps.keys() {
            let noise = gaussian(rng, rows, self.spec.out_dim) * self.spec.noise_std;
            let y = self.clean_targets(t, &inputs).unwrap() + noise;
            targets.insert(t.clone(), y);
        }
        for t in &self.spec.tasks {
            if let TaskSource::Mirror { of, sign } = &t.source {
                let y = &targets[of] * *sign;
                targets.insert(t.id.clone(), y);
            }
        }
        (inputs, targets)
    }
}

/// Local data of one client, already cut into batches.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub train: Vec<Batch>,
    pub test: Vec<Batch>,
    /// Number of training samples; the FedAvg weight is proportional to it.
    pub size: usize,
}

impl ClientDataset {
    pub fn new(id: usize, train: Vec<Batch>, test: Vec<Batch>) -> Result<Self> {
        let size = train.iter().map(Batch::rows).sum();
        if size == 0 {
            return Err(Error::InvalidData(format!(
                "client {id} has no training data"
            )));
        }
        Ok(ClientDataset {
            id,
            train,
            test,
            size,
        })
    }

    pub fn test_size(&self) -> usize {
        self.test.iter().map(Batch::rows).sum()
    }
}

/// Client sizes (train + test samples).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeProfile {
    Uniform {
        per_client: usize,
    },
    /// Log-uniform sizes rescaled so the largest is `ratio` times the
    /// smallest, then rounded to sum to `total`.
    Skewed {
        total: usize,
        ratio: f64,
    },
}

impl SizeProfile {
    pub fn sizes(&self, clients: usize, seed: u64) -> Result<Vec<usize>> {
        if clients == 0 {
            return Err(Error::config("clients", "need at least one client"));
        }
        let sizes = match *self {
            SizeProfile::Uniform { per_client } => vec![per_client; clients],
            SizeProfile::Skewed { total, ratio } => {
                if ratio.is_nan() || ratio < 1.0 {
                    return Err(Error::config("sizes.ratio", "must be >= 1"));
                }
                let mut rng = rng::stream(seed, &[tag::CLIENT_SIZES]);
                let u: Vec<f64> = (0..clients).map(|_| rng.random::<f64>()).collect();
                let (lo, hi) = u
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                        (a.min(v), b.max(v))
                    });
                let w: Vec<f64> = u
                    .iter()
                    .map(|&v| {
                        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                        ratio.powf(t)
                    })
                    .collect();
                largest_remainder(total, &w)
            }
        };
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::config(
                "sizes",
                format!("client {k} would receive no data"),
            ));
        }
        Ok(sizes)
    }
}

/// Integer apportionment of `total` proportional to `weights`.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLayout {
    pub clients: usize,
    pub sizes: SizeProfile,
    pub test_fraction: f64,
    pub batch_size: usize,
}

fn make_batches(
    inputs: &Array2<f64>,
    targets: &BTreeMap<TaskId, Array2<f64>>,
    rows: std::ops::Range<usize>,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    let mut start = rows.start;
    while start < rows.end {
        let end = (start + batch_size).min(rows.end);
        let x = inputs.slice(s![start..end, ..]).to_owned();
        let y = targets
            .iter()
            .map(|(t, m)| (t.clone(), m.slice(s![start..end, ..]).to_owned()))
            .collect();
        out.push(Batch::new(x, y)?);
        start = end;
    }
    Ok(out)
}

/// Draws every client's data independently, with skewed sizes and a
/// per-client input mean shift, and cuts it into train/test batches.
pub fn partition_clients(
    suite: &Suite,
    layout: &ClientLayout,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if layout.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if !(0.0..1.0).contains(&layout.test_fraction) {
        return Err(Error::config("test_fraction", "must lie in [0, 1)"));
    }
    let sizes = layout.sizes.sizes(layout.clients, seed)?;
    sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let mut rng = rng::stream(seed, &[tag::CLIENT_DATA, k as u64]);
            let offset: Array1<f64> = Array1::from_shape_simple_fn(suite.spec.input_dim, || {
                let z: f64 = StandardNormal.sample(&mut rng);
                suite.spec.feature_shift * z
            });
            let (x, y) = suite.sample(&mut rng, size, &offset);
            let n_test = (size as f64 * layout.test_fraction).round() as usize;
            let n_train = size - n_test.min(size - 1);
            let train = make_batches(&x, &y, 0..n_train, layout.batch_size)?;
            let test = make_batches(&x, &y, n_train..size, layout.batch_size)?;
            ClientDataset::new(k, train, test)
        })
        .collect()
}

/// Sidecar describing an exported suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub suite: SuiteSpec,
    pub layout: ClientLayout,
    pub clustering: BTreeMap<TaskId, usize>,
    pub out_dims: BTreeMap<TaskId, usize>,
    pub client_files: Vec<String>,
}

/// Writes `manifest.json` and one `client_<k>.csv` per client. Each CSV
/// row is `split,x0..x{d-1},<task>.<o>...`; floats use the shortest
/// round-trip representation so imports are bit-exact.
pub fn export_clients(
    dir: &Path,
    suite: &Suite,
    layout: &ClientLayout,
    seed: u64,
    clients: &[ClientDataset],
) -> Result<SuiteManifest> {
    fs::create_dir_all(dir)?;
    let d = suite.spec.input_dim;
    let out_dims: BTreeMap<TaskId, usize> = suite
        .task_specs
        .iter()
        .map(|t| (t.id.clone(), t.out_dim))
        .collect();
    let mut header = vec!["split".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    for (t, &o) in &out_dims {
        header.extend((0..o).map(|j| format!("{t}.{j}")));
    }

    let mut files = Vec::new();
    for c in clients {
        let name = format!("client_{}.csv", c.id);
        let mut w = csv::Writer::from_path(dir.join(&name)).map_err(csv_err)?;
        w.write_record(&header).map_err(csv_err)?;
        for (split, batches) in [("train", &c.train), ("test", &c.test)] {
            for b in batches {
                for r in 0..b.rows() {
                    let mut rec = vec![split.to_string()];
                    rec.extend(b.inputs().row(r).iter().map(|v| v.to_string()));
                    for t in out_dims.keys() {
                        rec.extend(b.target(t)?.row(r).iter().map(|v| v.to_string()));
                    }
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        files.push(name);
    }
    let manifest = SuiteManifest {
        seed,
        suite: suite.spec.clone(),
        layout: layout.clone(),
        clustering: suite.clustering.clone(),
        out_dims,
        client_files: files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidData(format!("csv: {e}"))
}

/// Reads clients written by [`export_clients`], re-batching with the
/// manifest's batch size.
pub fn import_clients(dir: &Path) -> Result<(SuiteManifest, Vec<ClientDataset>)> {
    let manifest: SuiteManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let d = manifest.suite.input_dim;
    let width = 1 + d + manifest.out_dims.values().sum::<usize>();
    let mut clients = Vec::new();
    for (k, name) in manifest.client_files.iter().enumerate() {
        let mut r = csv::Reader::from_path(dir.join(name)).map_err(csv_err)?;
        let mut rows: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != width {
                return Err(Error::InvalidData(format!(
                    "{name}: expected {width} columns"
                )));
            }
            let split = match &rec[0] {
                "train" => 0,
                "test" => 1,
                other => return Err(Error::InvalidData(format!("{name}: bad split {other}"))),
            };
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidData(format!("{name}: {e}")))?;
            rows[split].push(vals);
        }
        let [train, test] = rows.map(|split| {
            let n = split.len();
            let flat: Vec<f64> = split.into_iter().flatten().collect();
            Array2::from_shape_vec((n, width - 1), flat).expect("row widths checked")
        });
        let to_batches = |m: Array2<f64>| -> Result<Vec<Batch>> {
            let x = m.slice(s![.., 0..d]).to_owned();
            let mut col = d;
            let mut y = BTreeMap::new();
            for (t, &o) in &manifest.out_dims {
                y.insert(t.clone(), m.slice(s![.., col..col + o]).to_owned());
                col += o;
            }
            let n = x.nrows();
            make_batches(&x, &y, 0..n, manifest.layout.batch_size)
        };
        clients.push(ClientDataset::new(
            k,
            to_batches(train)?,
            to_batches(test)?,
        )?);
    }
    Ok((manifest, clients))
}
