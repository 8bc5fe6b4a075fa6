use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskId;

/// Name and dimensions of one parameter tensor inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub id: String,
    pub dims: Vec<usize>,
}

impl LayerShape {
    pub fn new(id: impl Into<String>, dims: Vec<usize>) -> Self {
        LayerShape {
            id: id.into(),
            dims,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Flat f64 storage for a list of named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<LayerShape>) -> Self {
        let n = layout.iter().map(LayerShape::numel).sum();
        ParamVector {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<LayerShape>) -> Result<Self> {
        let n: usize = layout.iter().map(LayerShape::numel).sum();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                context: "parameter vector".into(),
                expected: vec![n],
                found: vec![values.len()],
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    fn offset(&self, idx: usize) -> usize {
        self.layout[..idx].iter().map(LayerShape::numel).sum()
    }

    pub fn layer(&self, idx: usize) -> &[f64] {
        let start = self.offset(idx);
        &self.values[start..start + self.layout[idx].numel()]
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut [f64] {
        let start = self.offset(idx);
        let n = self.layout[idx].numel();
        &mut self.values[start..start + n]
    }

    /// Row-major matrix view of a 2-d layer.
    pub fn matrix(&self, idx: usize) -> ArrayView2<'_, f64> {
        let dims = &self.layout[idx].dims;
        ArrayView2::from_shape((dims[0], dims[1]), self.layer(idx))
            .expect("layout dims match storage")
    }

    pub fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.layer(idx))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Exact equality on the bit patterns, so `-0.0 != 0.0` and NaN == NaN.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }
}

/// Trunk plus one parameter vector per task head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub trunk: ParamVector,
    pub heads: BTreeMap<TaskId, ParamVector>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Params {
            trunk: self.trunk.zeros_like(),
            heads: self
                .heads
                .iter()
                .map(|(t, h)| (t.clone(), h.zeros_like()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.trunk.len() + self.heads.values().map(ParamVector::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.trunk.same_layout(&other.trunk)
            && self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|((ta, a), (tb, b))| ta == tb && a.same_layout(b))
    }

    /// Trunk first, then heads in task-id order.
    pub fn iter(&self) -> impl Iterator<Item = (Option<&TaskId>, &ParamVector)> {
        std::iter::once((None, &self.trunk)).chain(self.heads.iter().map(|(t, h)| (Some(t), h)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Option<&TaskId>, &mut ParamVector)> {
        std::iter::once((None, &mut self.trunk))
            .chain(self.heads.iter_mut().map(|(t, h)| (Some(t), h)))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, p)| p.is_finite())
    }

    pub fn bit_eq(&self, other: &Params) -> bool {
        self.trunk.bit_eq(&other.trunk)
            && self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|((ta, a), (tb, b))| ta == tb && a.bit_eq(b))
    }

    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        self.trunk.axpy(alpha, &other.trunk);
        for (t, h) in self.heads.iter_mut() {
            h.axpy(alpha, &other.heads[t]);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|(_, p)| p.scale(alpha));
    }
}
