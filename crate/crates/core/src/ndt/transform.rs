//! The per-leaf transform `H(a) = W2 tanh(W1 a + b1) + b2`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::params::{ParamStore, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TransformIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Borrowed weights of one transform.
pub struct LeafTransform<'a> {
    pub(crate) ids: TransformIds,
    pub(crate) store: &'a ParamStore,
}

impl LeafTransform<'_> {
    pub fn hidden_width(&self) -> usize {
        self.store.mat(self.ids.w1).nrows()
    }

    pub fn output_width(&self) -> usize {
        self.store.mat(self.ids.w2).nrows()
    }

    /// Hidden activations and outputs for the rows of `x`.
    pub(crate) fn forward_rows(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let s = self.store;
        let hidden = (x.dot(&s.mat(self.ids.w1).t()) + s.vec(self.ids.b1)).mapv(f64::tanh);
        let out = hidden.dot(&s.mat(self.ids.w2).t()) + s.vec(self.ids.b2);
        (hidden, out)
    }

    /// Outputs only.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_rows(x).1
    }

    /// Accumulates parameter gradients for output gradients `dout`.
    pub(crate) fn backward_rows(
        &self,
        x: ArrayView2<f64>,
        hidden: &Array2<f64>,
        dout: ArrayView2<f64>,
        grads: &mut ParamStore,
    ) {
        let s = self.store;
        {
            let mut g = grads.mat_mut(self.ids.w2);
            g += &dout.t().dot(hidden);
        }
        {
            let mut g = grads.vec_mut(self.ids.b2);
            g += &dout.sum_axis(Axis(0));
        }
        let dhidden = dout.dot(&s.mat(self.ids.w2)) * hidden.mapv(|h| 1.0 - h * h);
        {
            let mut g = grads.mat_mut(self.ids.w1);
            g += &dhidden.t().dot(&x);
        }
        let mut g = grads.vec_mut(self.ids.b1);
        g += &dhidden.sum_axis(Axis(0));
    }
}
