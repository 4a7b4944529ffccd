use serde::{Deserialize, Serialize};

/// A model whose trainable tensors can be enumerated in a fixed order.
///
/// Gradients and optimizer moments are stored in values of the same type, so
/// `params()` of a model and of its gradient line up index by index.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &[f64])>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    /// Same structure with every trainable entry set to zero.
    fn zeros_like(&self) -> Self;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub steps: u64,
}

impl<P: Parameters> AdamState<P> {
    pub fn new(model: &P) -> Self {
        AdamState {
            m: model.zeros_like(),
            v: model.zeros_like(),
            steps: 0,
        }
    }
}

impl Adam {
    pub fn step<P: Parameters>(&self, model: &mut P, grads: &P, state: &mut AdamState<P>) {
        state.steps += 1;
        let t = state.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let grads = grads.params();
        let params = model.params_mut();
        let ms = state.m.params_mut();
        let vs = state.v.params_mut();
        assert_eq!(params.len(), grads.len());
        for (((p, (_, g)), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
