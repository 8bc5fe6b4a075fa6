use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::loss::{loss_gradient, loss_value};
use super::param::{LayerShape, ParamVector, Params};
use crate::error::{Error, Result};
use crate::task::{LossKind, TaskId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => 1.0,
        }
    }
}

/// Fully-connected trunk: `input_dim -> hidden[0] -> ... -> hidden[last]`.
/// An empty `hidden` list means the heads read the raw inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl TrunkArch {
    pub fn output_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        let mut fan_in = self.input_dim;
        let mut layout = Vec::with_capacity(2 * self.hidden.len());
        for (l, &width) in self.hidden.iter().enumerate() {
            layout.push(LayerShape::new(
                format!("trunk.{l}.weight"),
                vec![width, fan_in],
            ));
            layout.push(LayerShape::new(format!("trunk.{l}.bias"), vec![width]));
            fan_in = width;
        }
        layout
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(LayerShape::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadArch {
    pub out_dim: usize,
    #[serde(default)]
    pub loss: LossKind,
}

impl HeadArch {
    pub fn layout(&self, in_dim: usize) -> Vec<LayerShape> {
        vec![
            LayerShape::new("head.weight", vec![self.out_dim, in_dim]),
            LayerShape::new("head.bias", vec![self.out_dim]),
        ]
    }

    pub fn num_params(&self, in_dim: usize) -> usize {
        self.out_dim * (in_dim + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub trunk: TrunkArch,
    pub heads: BTreeMap<TaskId, HeadArch>,
}

impl Arch {
    pub fn head_layout(&self, task: &TaskId) -> Option<Vec<LayerShape>> {
        self.heads
            .get(task)
            .map(|h| h.layout(self.trunk.output_dim()))
    }

    /// Checks that `params` carries exactly the tensors this architecture needs.
    pub fn check_params(&self, params: &Params) -> Result<()> {
        check_layout("trunk", &self.trunk.layout(), params.trunk.layout())?;
        if params.heads.len() != self.heads.len() || !params.heads.keys().eq(self.heads.keys()) {
            return Err(Error::InvalidData(format!(
                "head set {:?} does not match architecture {:?}",
                params.heads.keys().collect::<Vec<_>>(),
                self.heads.keys().collect::<Vec<_>>()
            )));
        }
        let in_dim = self.trunk.output_dim();
        for (task, head) in &self.heads {
            check_layout(
                &format!("head {task}"),
                &head.layout(in_dim),
                params.heads[task].layout(),
            )?;
        }
        Ok(())
    }
}

fn check_layout(context: &str, expected: &[LayerShape], found: &[LayerShape]) -> Result<()> {
    let dims = |l: &[LayerShape]| l.iter().flat_map(|s| s.dims.clone()).collect::<Vec<_>>();
    if expected.len() != found.len() || expected.iter().zip(found).any(|(a, b)| a.dims != b.dims) {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: dims(expected),
            found: dims(found),
        });
    }
    Ok(())
}

/// Inputs plus per-task regression targets, all with the same row count.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
    targets: BTreeMap<TaskId, Array2<f64>>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: BTreeMap<TaskId, Array2<f64>>) -> Result<Self> {
        for (task, y) in &targets {
            if y.nrows() != inputs.nrows() {
                return Err(Error::ShapeMismatch {
                    context: format!("targets of task {task}"),
                    expected: vec![inputs.nrows()],
                    found: vec![y.nrows()],
                });
            }
        }
        Ok(Batch { inputs, targets })
    }

    pub fn rows(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &BTreeMap<TaskId, Array2<f64>> {
        &self.targets
    }

    pub fn target(&self, task: &TaskId) -> Result<&Array2<f64>> {
        self.targets
            .get(task)
            .ok_or_else(|| Error::MissingTarget(task.clone()))
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Pre-activations of every trunk layer.
    pub pre: Vec<Array2<f64>>,
    /// `post[0]` is the input batch; `post[l + 1]` is the output of trunk layer `l`.
    pub post: Vec<Array2<f64>>,
    pub predictions: BTreeMap<TaskId, Array2<f64>>,
}

impl ForwardPass {
    pub fn features(&self) -> &Array2<f64> {
        self.post.last().expect("post always holds the inputs")
    }
}

fn dense(x: ArrayView2<'_, f64>, params: &ParamVector, w_idx: usize) -> Array2<f64> {
    let w = params.matrix(w_idx);
    let b = params.vector(w_idx + 1);
    x.dot(&w.t()) + b
}

pub fn forward(arch: &Arch, params: &Params, batch: &Batch) -> Result<ForwardPass> {
    arch.check_params(params)?;
    if batch.inputs.ncols() != arch.trunk.input_dim {
        return Err(Error::ShapeMismatch {
            context: "trunk.0 input".into(),
            expected: vec![arch.trunk.input_dim],
            found: vec![batch.inputs.ncols()],
        });
    }
    let act = arch.trunk.activation;
    let mut pre = Vec::with_capacity(arch.trunk.hidden.len());
    let mut post = Vec::with_capacity(arch.trunk.hidden.len() + 1);
    post.push(batch.inputs.clone());
    for l in 0..arch.trunk.hidden.len() {
        let z = dense(post[l].view(), &params.trunk, 2 * l);
        post.push(z.mapv(|v| act.apply(v)));
        pre.push(z);
    }
    let features = post.last().unwrap().view();
    let predictions = params
        .heads
        .iter()
        .map(|(task, head)| (task.clone(), dense(features, head, 0)))
        .collect();
    Ok(ForwardPass {
        pre,
        post,
        predictions,
    })
}

fn checked_loss(task: &TaskId, kind: LossKind, pred: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if pred.dim() != y.dim() {
        return Err(Error::ShapeMismatch {
            context: format!("prediction of task {task}"),
            expected: vec![pred.nrows(), pred.ncols()],
            found: vec![y.nrows(), y.ncols()],
        });
    }
    let v = loss_value(kind, pred.view(), y.view());
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss { task: task.clone() });
    }
    Ok(v)
}

/// Per-task losses of every head on `batch`.
pub fn task_losses(arch: &Arch, params: &Params, batch: &Batch) -> Result<BTreeMap<TaskId, f64>> {
    let pass = forward(arch, params, batch)?;
    pass.predictions
        .iter()
        .map(|(task, pred)| {
            let y = batch.target(task)?;
            Ok((
                task.clone(),
                checked_loss(task, arch.heads[task].loss, pred, y)?,
            ))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BackwardPass {
    /// Gradient of `sum_t w_t * L_t`; heads without a weight get zeros.
    pub grads: Params,
    /// Unweighted loss of every weighted task.
    pub losses: BTreeMap<TaskId, f64>,
    /// `sum_t w_t * L_t`, summed in task-id order.
    pub total: f64,
}

/// Gradient of the unit-weighted joint loss over all heads.
pub fn backward(arch: &Arch, params: &Params, batch: &Batch) -> Result<BackwardPass> {
    let weights: BTreeMap<TaskId, f64> = arch.heads.keys().map(|t| (t.clone(), 1.0)).collect();
    backward_weighted(arch, params, batch, &weights)
}

pub fn backward_weighted(
    arch: &Arch,
    params: &Params,
    batch: &Batch,
    weights: &BTreeMap<TaskId, f64>,
) -> Result<BackwardPass> {
    let pass = forward(arch, params, batch)?;
    let mut grads = params.zeros_like();
    let features = pass.features();
    let mut d_features = Array2::<f64>::zeros(features.raw_dim());
    let mut losses = BTreeMap::new();
    let mut total = 0.0;

    for (task, &w) in weights {
        let head_arch = arch
            .heads
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.clone()))?;
        let pred = &pass.predictions[task];
        let y = batch.target(task)?;
        let loss = checked_loss(task, head_arch.loss, pred, y)?;
        losses.insert(task.clone(), loss);
        total += w * loss;

        let d_pred = loss_gradient(head_arch.loss, pred.view(), y.view()) * w;
        let head = &params.heads[task];
        let g = grads.heads.get_mut(task).unwrap();
        let dw = d_pred.t().dot(features);
        g.layer_mut(0)
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(a, b)| *a = *b);
        let db: Array1<f64> = d_pred.sum_axis(Axis(0));
        g.layer_mut(1)
            .iter_mut()
            .zip(db.iter())
            .for_each(|(a, b)| *a = *b);
        d_features += &d_pred.dot(&head.matrix(0));
    }

    let act = arch.trunk.activation;
    let mut d_post = d_features;
    for l in (0..arch.trunk.hidden.len()).rev() {
        let d_pre = &d_post * &pass.pre[l].mapv(|z| act.derivative(z));
        let dw = d_pre.t().dot(&pass.post[l]);
        let db = d_pre.sum_axis(Axis(0));
        grads
            .trunk
            .layer_mut(2 * l)
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(a, b)| *a = *b);
        grads
            .trunk
            .layer_mut(2 * l + 1)
            .iter_mut()
            .zip(db.iter())
            .for_each(|(a, b)| *a = *b);
        if l > 0 {
            d_post = d_pre.dot(&params.trunk.matrix(2 * l));
        }
    }

    Ok(BackwardPass {
        grads,
        losses,
        total,
    })
}

/// Gradient of one task's loss with respect to the trunk only.
pub fn trunk_gradient(
    arch: &Arch,
    params: &Params,
    batch: &Batch,
    task: &TaskId,
) -> Result<(ParamVector, f64)> {
    let weights = BTreeMap::from([(task.clone(), 1.0)]);
    let pass = backward_weighted(arch, params, batch, &weights)?;
    Ok((pass.grads.trunk, pass.total))
}
