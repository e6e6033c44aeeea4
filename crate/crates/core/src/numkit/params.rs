use indexmap::IndexMap;

use crate::error::{DyrexError, Result};
use crate::numkit::Matrix;

/// Handle to an entry of a [`ParamStore`]; stable for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    /// Frozen parameters never receive gradient and are skipped by the optimizer.
    pub trainable: bool,
}

/// Named trainable matrices with paired gradient buffers, kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(DyrexError::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        let (idx, _) = self.entries.insert_full(name, Param { value, grad, trainable });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Replaces a value, checking that the shape is unchanged.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(DyrexError::dim("set_value", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.zero();
        }
    }

    /// Fresh zeroed gradient buffers matching every entry.
    pub fn zeroed_grads(&self) -> GradSet {
        GradSet {
            grads: self
                .entries
                .values()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    /// Adds `grads` into the stored gradient buffers of trainable entries.
    pub fn accumulate(&mut self, grads: &GradSet) -> Result<()> {
        if grads.grads.len() != self.entries.len() {
            return Err(DyrexError::Internal("gradient set does not match store".into()));
        }
        for (p, g) in self.entries.values_mut().zip(&grads.grads) {
            if p.trainable {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Current values keyed by name, e.g. for bitwise comparisons.
    pub fn snapshot(&self) -> Vec<(String, Matrix)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.value.clone()))
            .collect()
    }
}

/// Gradient buffers parallel to a [`ParamStore`], used to accumulate one
/// example's contribution before it is reduced into the store.
#[derive(Debug, Clone)]
pub struct GradSet {
    grads: Vec<Matrix>,
}

impl GradSet {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    /// `grad[id] += delta`.
    pub fn add(&mut self, id: ParamId, delta: &Matrix) -> Result<()> {
        self.grads[id.0].add_assign(delta)
    }

    pub fn add_set(&mut self, other: &GradSet) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}
