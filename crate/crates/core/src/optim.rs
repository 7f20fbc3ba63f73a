//! Adam with L2 weight decay folded into the gradient.

use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub(crate) struct Adam {
    /// Learning rate per layout group.
    lrs: Vec<f64>,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    groups: Vec<usize>,
}

impl Adam {
    pub(crate) fn new(params: &ParamStore, lrs: Vec<f64>, weight_decay: f64) -> Self {
        let n = params.as_slice().len();
        Adam {
            lrs,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            groups: params.layout().groups(),
        }
    }

    pub(crate) fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let theta = params.as_mut_slice();
        for (i, (p, &g)) in theta.iter_mut().zip(grads.as_slice()).enumerate() {
            let g = g + self.weight_decay * *p;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= self.lrs[self.groups[i]] * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::params::Layout;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut layout = Layout::default();
        layout.add("a", &[2], 0);
        layout.add("b", &[1], 1);
        let mut p = ParamStore::zeros(Arc::new(layout));
        let mut g = p.zeros_like();
        g.as_mut_slice().copy_from_slice(&[2.0, -3.0, 0.5]);
        let mut adam = Adam::new(&p, vec![0.1, 0.01], 0.0);
        adam.step(&mut p, &g);
        let got = p.as_slice();
        assert!((got[0] + 0.1).abs() < 1e-6);
        assert!((got[1] - 0.1).abs() < 1e-6);
        assert!((got[2] + 0.01).abs() < 1e-6);
    }
}
