use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Lookup tables (embeddings, stationary factors) are updated row by row:
    /// rows that receive no gradient in an iteration are left untouched.
    pub row_sparse: bool,
}

/// Owns every trainable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn add_table(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor, row_sparse: bool) -> ParamId {
        self.params.push(Param {
            name,
            value,
            row_sparse,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn append_row(&mut self, id: ParamId, row: &[f64]) -> Result<usize> {
        let t = &mut self.params[id.0].value;
        t.push_row(row)?;
        Ok(t.rows() - 1)
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }
}

/// Gradient of a scalar with respect to every parameter of a store.
///
/// Entries stay `None` for parameters the scalar does not depend on. Row-sparse
/// parameters additionally carry which rows were touched.
#[derive(Clone, Debug)]
pub struct Grads {
    tensors: Vec<Option<Tensor>>,
    touched: Vec<Option<Vec<bool>>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            tensors: vec![None; store.len()],
            touched: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.tensors.get(id.0).and_then(|t| t.as_ref())
    }

    /// Rows of a row-sparse parameter that received gradient. `None` means
    /// the parameter is dense or untouched.
    pub fn touched_rows(&self, id: ParamId) -> Option<&[bool]> {
        self.touched.get(id.0).and_then(|t| t.as_deref())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.iter().all(|t| t.is_none())
    }

    /// Dense accumulator for `id`, allocated on first use.
    pub(crate) fn slot(&mut self, store: &ParamStore, id: ParamId) -> &mut Tensor {
        let shape = store.value(id);
        let (r, c) = (shape.rows(), shape.cols());
        if store.get(id).row_sparse && self.touched[id.0].is_none() {
            self.touched[id.0] = Some(vec![false; r]);
        }
        self.tensors[id.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    pub(crate) fn mark_row(&mut self, id: ParamId, row: usize) {
        if let Some(t) = self.touched[id.0].as_mut() {
            t[row] = true;
        }
    }

    pub(crate) fn mark_all(&mut self, id: ParamId) {
        if let Some(t) = self.touched[id.0].as_mut() {
            t.iter_mut().for_each(|b| *b = true);
        }
    }

    /// Adds `other` into `self`, merging touched rows.
    pub fn accumulate(&mut self, other: &Grads) {
        for (i, t) in other.tensors.iter().enumerate() {
            let Some(t) = t else { continue };
            match &mut self.tensors[i] {
                Some(mine) => mine.add_assign(t),
                slot @ None => *slot = Some(t.clone()),
            }
            if let Some(rows) = &other.touched[i] {
                match &mut self.touched[i] {
                    Some(mine) => mine.iter_mut().zip(rows).for_each(|(a, b)| *a |= *b),
                    slot @ None => *slot = Some(rows.clone()),
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(Tensor::all_finite)
    }

    /// Overwrites one gradient entry. Used to build corrupted fixtures in
    /// tests of the gradient checker.
    pub fn set_entry(&mut self, id: ParamId, index: usize, value: f64) -> Result<()> {
        let t = self.tensors[id.0]
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for param {}", id.0)))?;
        t.data_mut()[index] = value;
        Ok(())
    }

    /// Value of one scalar entry, zero when the parameter has no gradient.
    pub fn entry(&self, id: ParamId, index: usize) -> f64 {
        self.get(id).map_or(0.0, |t| t.data()[index])
    }
}
