//! Adaptive-moment gradient descent over a [`ParamStore`].

use crate::params::ParamStore;
use crate::scalar::Scalar;

pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update; `grads` must be in store id order.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Vec<S>]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        if self.first.is_empty() {
            for id in store.ids() {
                let n = store.data(id).len();
                self.first.push(vec![S::zero(); n]);
                self.second.push(vec![S::zero(); n]);
            }
        }
        self.step += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let eps = S::from_f64(self.eps);
        let bias1 = S::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = S::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = S::from_f64(self.lr);

        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            let g = &grads[idx];
            let data = store.data_mut(id);
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
