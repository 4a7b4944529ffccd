use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over all spatial sites of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Saved state for the training-mode backward pass.
#[derive(Debug)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Gradient holder: only `gamma` and `beta` are trainable.
    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        BatchNorm {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![0.0; c],
        }
    }

    /// Normalizes with the sample's own statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BatchNormCache) {
        let n = x.plane_len() as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(self.gamma.len());
        for c in 0..x.channels() {
            let src = x.channel(c);
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std.push(istd);
            let (g, b) = (self.gamma[c], self.beta[c]);
            for ((h, o), v) in xhat.channel_mut(c).iter_mut().zip(y.channel_mut(c)).zip(src) {
                *h = (v - mean) * istd;
                *o = g * *h + b;
            }
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean;
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * unbiased;
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    /// Per-channel affine map using the frozen running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for c in 0..x.channels() {
            let istd = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
            let scale = self.gamma[c] * istd;
            let shift = self.beta[c] - self.running_mean[c] * scale;
            for v in y.channel_mut(c) {
                *v = *v * scale + shift;
            }
        }
        y
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Tensor, grad: &mut BatchNorm) -> Tensor {
        let n = dy.plane_len() as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for c in 0..dy.channels() {
            let g = dy.channel(c);
            let xh = cache.xhat.channel(c);
            let sum_dy: f64 = g.iter().sum();
            let sum_dy_xhat: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            grad.gamma[c] += sum_dy_xhat;
            grad.beta[c] += sum_dy;
            let k = self.gamma[c] * cache.inv_std[c] / n;
            for ((o, gi), xi) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *o = k * (n * gi - sum_dy - xi * sum_dy_xhat);
            }
        }
        dx
    }
}
