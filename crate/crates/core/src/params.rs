//! Flat parameter storage with a named tensor layout.
//!
//! Every trainable model keeps its weights in one contiguous `Vec<f64>`;
//! a [`Layout`] records the name, shape, offset and learning-rate group of
//! each tensor. Gradients, Adam moments and finite-difference probes all
//! reuse the same layout, which keeps optimizer and serialization code
//! model-agnostic.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], group: usize) -> TensorId {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            group,
        };
        self.total += spec.len();
        self.specs.push(spec);
        TensorId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Group of every scalar, in storage order.
    pub fn groups(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total);
        for spec in &self.specs {
            out.extend(std::iter::repeat_n(spec.group, spec.len()));
        }
        out
    }

    /// Name and multi-index of a flat coordinate, for diagnostics.
    pub fn describe(&self, flat: usize) -> String {
        let spec = self
            .specs
            .iter()
            .find(|s| (s.offset..s.offset + s.len()).contains(&flat))
            .expect("coordinate inside layout");
        let mut rem = flat - spec.offset;
        let mut idx = vec![0; spec.shape.len()];
        for (d, &extent) in spec.shape.iter().enumerate().rev() {
            idx[d] = rem % extent;
            rem /= extent;
        }
        format!("{}{:?}", spec.name, idx)
    }
}

/// A parameter (or gradient) vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.total()];
        ParamStore { layout, data }
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn range(&self, id: TensorId) -> std::ops::Range<usize> {
        let spec = self.layout.spec(id);
        spec.offset..spec.offset + spec.len()
    }

    pub fn slice(&self, id: TensorId) -> &[f64] {
        &self.data[self.range(id)]
    }

    pub fn slice_mut(&mut self, id: TensorId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn vec(&self, id: TensorId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    pub fn vec_mut(&mut self, id: TensorId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn mat(&self, id: TensorId) -> ArrayView2<'_, f64> {
        let shape = self.matrix_shape(id);
        ArrayView2::from_shape(shape, self.slice(id)).expect("layout shape")
    }

    pub fn mat_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, f64> {
        let shape = self.matrix_shape(id);
        ArrayViewMut2::from_shape(shape, self.slice_mut(id)).expect("layout shape")
    }

    fn matrix_shape(&self, id: TensorId) -> (usize, usize) {
        match self.layout.spec(id).shape[..] {
            [r, c] => (r, c),
            ref other => panic!("tensor {} has shape {other:?}, not a matrix", self.layout.spec(id).name),
        }
    }

    /// `self += other`, scalar by scalar in storage order.
    pub fn add_assign(&mut self, other: &ParamStore) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.layout
            .specs()
            .iter()
            .map(|spec| NamedTensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                data: self.data[spec.offset..spec.offset + spec.len()].to_vec(),
            })
            .collect()
    }

    /// Fills a store laid out by `layout` from serialized tensors. Names,
    /// order and shapes must match exactly.
    pub fn from_named(layout: Arc<Layout>, tensors: &[NamedTensor]) -> Result<Self> {
        if tensors.len() != layout.specs().len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                layout.specs().len(),
                tensors.len()
            )));
        }
        let mut store = ParamStore::zeros(layout.clone());
        for (spec, t) in layout.specs().iter().zip(tensors) {
            if spec.name != t.name || spec.shape != t.shape {
                return Err(Error::invalid(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, spec.name, spec.shape
                )));
            }
            if t.data.len() != spec.len() {
                return Err(Error::invalid(format!(
                    "tensor {} holds {} values, shape needs {}",
                    t.name,
                    t.data.len(),
                    spec.len()
                )));
            }
            if let Some(v) = t.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("tensor {} contains {v}", t.name)));
            }
            store.data[spec.offset..spec.offset + spec.len()].copy_from_slice(&t.data);
        }
        Ok(store)
    }
}

/// Serialized form of one tensor: row-major data plus its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_follow_layout() {
        let mut layout = Layout::default();
        let a = layout.add("a", &[2, 3], 0);
        let b = layout.add("b", &[4], 1);
        let layout = Arc::new(layout);
        let mut store = ParamStore::zeros(layout.clone());
        store.mat_mut(a)[[1, 2]] = 5.0;
        store.vec_mut(b)[3] = 7.0;
        assert_eq!(store.as_slice()[5], 5.0);
        assert_eq!(store.as_slice()[9], 7.0);
        assert_eq!(layout.describe(5), "a[1, 2]");
        assert_eq!(layout.describe(9), "b[3]");
        assert_eq!(layout.groups(), vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);

        let named = store.to_named();
        let back = ParamStore::from_named(layout.clone(), &named).unwrap();
        assert_eq!(back, store);

        let mut bad = named.clone();
        bad[0].shape = vec![3, 2];
        assert!(ParamStore::from_named(layout, &bad).is_err());
    }
}
