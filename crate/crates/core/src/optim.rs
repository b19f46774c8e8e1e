//! Adam over the trainable subset of a [`ParamStore`].

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moment buffers for every trainable parameter of `store`.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let ids = store.trainable();
        let zeros: Vec<Tensor> = ids.iter().map(|&i| Tensor::zeros(store.value(i).shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            ids,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update. `grads[i]` belongs to `self.params()[i]`; `None`
    /// means the parameter took no part in the loss and is left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), self.ids.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.value_mut(self.ids[k]);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::matrix(1, 2, vec![1.0, -1.0]), true, Role::Student);
        let mut opt = Adam::new(&s, 0.1);
        opt.update(&mut s, &[Some(Tensor::matrix(1, 2, vec![3.0, -0.5]))]);
        let w = s.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::matrix(1, 1, vec![0.25]), true, Role::Student);
        let mut opt = Adam::new(&s, 0.0);
        opt.update(&mut s, &[Some(Tensor::scalar(2.0).reshape(vec![1, 1]).unwrap())]);
        assert_eq!(s.value(id).data(), &[0.25]);
    }
}
