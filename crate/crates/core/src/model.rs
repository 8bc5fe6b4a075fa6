//! Shared-trunk multi-head models and their merge / split / reconstruct
//! lifecycle.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Arch, Batch, HeadArch, LayerShape, ParamVector, Params, TrunkArch};
use crate::partition::Partition;
use crate::rng::{self, tag};
use crate::task::{TaskId, TaskSpec};

const CHECKPOINT_MAGIC: &[u8; 8] = b"MASCKPT1";

/// Per-task losses plus their unweighted sum (task-id order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub per_task: BTreeMap<TaskId, f64>,
    pub total: f64,
}

impl TaskLosses {
    pub fn from_map(per_task: BTreeMap<TaskId, f64>) -> Self {
        let total = per_task.values().sum();
        TaskLosses { per_task, total }
    }
}

/// One trunk and one head per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskModel {
    arch: Arch,
    params: Params,
}

/// Glorot-uniform weights, zero biases.
fn init_layer(layout: Vec<LayerShape>, rng: &mut impl Rng) -> ParamVector {
    let mut p = ParamVector::zeros(layout);
    for idx in 0..p.layout().len() {
        let dims = p.layout()[idx].dims.clone();
        if dims.len() == 2 {
            let a = (6.0 / (dims[0] + dims[1]) as f64).sqrt();
            p.layer_mut(idx)
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-a..=a));
        }
    }
    p
}

/// Builds the all-in-one model for `specs`.
///
/// Trunk layers draw from `(seed, trunk, layer)` streams and each head from
/// `(seed, head, task id)`, so a task's initial head does not depend on
/// which other tasks are merged with it.
pub fn merge_tasks(specs: &[TaskSpec], trunk: &TrunkArch, seed: u64) -> Result<MultiTaskModel> {
    if specs.is_empty() {
        return Err(Error::InvalidData("cannot merge an empty task list".into()));
    }
    let mut heads = BTreeMap::new();
    for spec in specs {
        if spec.out_dim == 0 {
            return Err(Error::InvalidData(format!(
                "task {} has zero output dim",
                spec.id
            )));
        }
        let head = HeadArch {
            out_dim: spec.out_dim,
            loss: spec.loss,
        };
        if heads.insert(spec.id.clone(), head).is_some() {
            return Err(Error::DuplicateTask(spec.id.clone()));
        }
    }
    if trunk.input_dim == 0 || trunk.hidden.contains(&0) {
        return Err(Error::InvalidData(
            "trunk dimensions must be positive".into(),
        ));
    }
    let arch = Arch {
        trunk: trunk.clone(),
        heads,
    };

    let mut trunk_params = ParamVector::zeros(trunk.layout());
    for l in 0..trunk.hidden.len() {
        let mut rng = rng::stream(seed, &[tag::INIT_TRUNK, l as u64]);
        let layer = init_layer(trunk.layout()[2 * l..2 * l + 2].to_vec(), &mut rng);
        trunk_params
            .layer_mut(2 * l)
            .copy_from_slice(layer.layer(0));
    }
    let head_params = arch
        .heads
        .keys()
        .map(|task| {
            let mut rng = rng::stream(seed, &[tag::INIT_HEAD, rng::hash_str(task.as_str())]);
            let layout = arch.head_layout(task).unwrap();
            (task.clone(), init_layer(layout, &mut rng))
        })
        .collect();

    Ok(MultiTaskModel {
        arch,
        params: Params {
            trunk: trunk_params,
            heads: head_params,
        },
    })
}

impl MultiTaskModel {
    pub fn from_parts(arch: Arch, params: Params) -> Result<Self> {
        if arch.heads.is_empty() {
            return Err(Error::InvalidData("model needs at least one head".into()));
        }
        arch.check_params(&params)?;
        Ok(MultiTaskModel { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Replaces the parameters, keeping the architecture.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        self.arch.check_params(&params)?;
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn trunk(&self) -> &ParamVector {
        &self.params.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut ParamVector {
        &mut self.params.trunk
    }

    pub fn head(&self, task: &TaskId) -> Option<&ParamVector> {
        self.params.heads.get(task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskId> {
        self.arch.heads.keys()
    }

    pub fn task_set(&self) -> BTreeSet<TaskId> {
        self.tasks().cloned().collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.arch.heads.len()
    }

    pub fn trunk_param_count(&self) -> usize {
        self.params.trunk.len()
    }

    pub fn head_param_count(&self) -> usize {
        self.params.heads.values().map(ParamVector::len).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Per-task losses on `batch`, total = plain sum over tasks.
    pub fn joint_loss(&self, batch: &Batch) -> Result<TaskLosses> {
        Ok(TaskLosses::from_map(nn::task_losses(
            &self.arch,
            &self.params,
            batch,
        )?))
    }

    /// Sub-model with a copy of the trunk and the heads of `tasks`.
    pub fn restrict<'a>(
        &self,
        tasks: impl IntoIterator<Item = &'a TaskId>,
    ) -> Result<MultiTaskModel> {
        let mut heads = BTreeMap::new();
        let mut head_params = BTreeMap::new();
        for task in tasks {
            let head = self
                .arch
                .heads
                .get(task)
                .ok_or_else(|| Error::UnknownTask(task.clone()))?;
            heads.insert(task.clone(), head.clone());
            head_params.insert(task.clone(), self.params.heads[task].clone());
        }
        MultiTaskModel::from_parts(
            Arch {
                trunk: self.arch.trunk.clone(),
                heads,
            },
            Params {
                trunk: self.params.trunk.clone(),
                heads: head_params,
            },
        )
    }

    /// One model per block; every split owns its own copy of the trunk.
    pub fn split(&self, partition: &Partition) -> Result<Vec<MultiTaskModel>> {
        partition.check_covers(&self.task_set())?;
        partition
            .blocks()
            .iter()
            .map(|block| self.restrict(block))
            .collect()
    }

    /// Binary checkpoint: magic, little-endian u64 header length, JSON
    /// header (architecture + layouts), then every value as LE f64 bits.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            arch: &'a Arch,
            trunk: &'a [LayerShape],
            heads: BTreeMap<&'a TaskId, &'a [LayerShape]>,
        }
        let header = serde_json::to_vec(&Header {
            arch: &self.arch,
            trunk: self.params.trunk.layout(),
            heads: self
                .params
                .heads
                .iter()
                .map(|(t, h)| (t, h.layout()))
                .collect(),
        })?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, p) in self.params.iter() {
            for v in p.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            arch: Arch,
            trunk: Vec<LayerShape>,
            heads: BTreeMap<TaskId, Vec<LayerShape>>,
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;

        let mut read_vec = |layout: Vec<LayerShape>| -> Result<ParamVector> {
            let n: usize = layout.iter().map(LayerShape::numel).sum();
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ParamVector::from_parts(values, layout)
        };
        let trunk = read_vec(header.trunk)?;
        let mut heads = BTreeMap::new();
        for (task, layout) in header.heads {
            heads.insert(task, read_vec(layout)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        MultiTaskModel::from_parts(header.arch, Params { trunk, heads })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: MultiTaskModel = serde_json::from_str(s)?;
        MultiTaskModel::from_parts(m.arch, m.params)
    }
}

/// Splits models back into one single-task model per task.
pub fn reconstruct(splits: &[MultiTaskModel]) -> Result<BTreeMap<TaskId, MultiTaskModel>> {
    let mut out = BTreeMap::new();
    for split in splits {
        for task in split.tasks() {
            if out.contains_key(task) {
                return Err(Error::DuplicateTask(task.clone()));
            }
            out.insert(task.clone(), split.restrict([task])?);
        }
    }
    Ok(out)
}
