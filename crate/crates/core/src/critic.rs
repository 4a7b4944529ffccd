//! Slice texture discriminators: `N` fully convolutional 2D critics that
//! score an image as the mean of a single-channel response field, with an
//! optional shared frozen feature front-end.
//!
//! Critics contain only convolutions and leaky rectifiers. Because the
//! rectifier is piecewise linear, the input gradient of a score is linear in
//! the weights of each layer once the activation pattern is fixed, which is
//! what [`Critic::penalty_backward`] exploits to differentiate the gradient
//! penalty with respect to the weights.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::frontend::{FrontEnd, FrontEndTrace, OUT_CHANNELS};
use crate::nn::activation::{leaky_relu, leaky_relu_grad};
use crate::nn::{Conv, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub width: usize,
    /// Kernel edge of every layer; the last layer outputs one channel.
    pub kernels: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            width: 64,
            kernels: vec![3, 3, 3, 1, 1],
            leaky_slope: 0.2,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1, "critic width must be positive");
        ensure!(!self.kernels.is_empty(), "critic needs at least one layer");
        ensure!(
            self.kernels.iter().all(|k| k % 2 == 1),
            "critic kernel edges must be odd, got {:?}",
            self.kernels
        );
        ensure!(
            self.leaky_slope.is_finite() && self.leaky_slope >= 0.0,
            "critic leaky_slope must be a finite non-negative number"
        );
        Ok(())
    }
}

/// One critic: convolutions separated by leaky rectifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub layers: Vec<Conv>,
    pub leaky_slope: f64,
}

/// Activations of one forward pass.
#[derive(Debug)]
pub struct CriticTrace {
    /// Input of every layer.
    inputs: Vec<Tensor>,
    /// Pre-activation of every layer but the last.
    pre: Vec<Tensor>,
    field_sites: usize,
}

impl Critic {
    pub fn new(in_channels: usize, config: &CriticConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.kernels.len();
        let layers = config
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let cin = if i == 0 { in_channels } else { config.width };
                let cout = if i + 1 == n { 1 } else { config.width };
                Conv::he_normal(cin, cout, [1, k, k], true, config.leaky_slope, rng)
            })
            .collect();
        Ok(Critic {
            layers,
            leaky_slope: config.leaky_slope,
        })
    }

    /// Critic from explicit layers; the last must output one channel.
    pub fn from_layers(layers: Vec<Conv>, leaky_slope: f64) -> Result<Self> {
        ensure!(!layers.is_empty(), "critic needs at least one layer");
        ensure!(
            layers.last().map(|l| l.out_channels) == Some(1),
            "the last critic layer must output one channel"
        );
        ensure!(
            layers.windows(2).all(|w| w[0].out_channels == w[1].in_channels),
            "critic layer channel counts do not chain"
        );
        ensure!(
            layers.iter().all(|l| l.kernel[0] == 1),
            "critic layers must be 2D kernels"
        );
        Ok(Critic { layers, leaky_slope })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.kernel[1] - 1).sum::<usize>()
    }

    pub fn forward(&self, x: &Tensor) -> (f64, CriticTrace) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if i == last {
                let sites = z.len();
                let trace = CriticTrace {
                    inputs,
                    pre,
                    field_sites: sites,
                };
                return (z.mean(), trace);
            }
            h = z.map(|v| leaky_relu(v, self.leaky_slope));
            pre.push(z);
        }
        unreachable!("critic has at least one layer")
    }

    pub fn score(&self, x: &Tensor) -> f64 {
        self.forward(x).0
    }

    /// Upstream gradient at every layer's pre-activation for `d loss / d score = dscore`.
    fn layer_grads(&self, trace: &CriticTrace, dscore: f64) -> Vec<Tensor> {
        let n = self.layers.len();
        let last_shape = {
            let s = trace.inputs[n - 1].shape();
            [1, s[1], s[2], s[3]]
        };
        let mut dz = vec![Tensor::full(last_shape, dscore / trace.field_sites as f64)];
        for i in (0..n - 1).rev() {
            let mut d = self.layers[i + 1].backward_input(dz.last().unwrap());
            for (g, &p) in d.data_mut().iter_mut().zip(trace.pre[i].data()) {
                *g *= leaky_relu_grad(p, self.leaky_slope);
            }
            dz.push(d);
        }
        dz.reverse();
        dz
    }

    /// Backpropagates `dscore`. Parameter gradients are added to `grad` when
    /// given; the input gradient is returned.
    pub fn backward(&self, trace: &CriticTrace, dscore: f64, grad: Option<&mut Critic>) -> Tensor {
        let dz = self.layer_grads(trace, dscore);
        if let Some(grad) = grad {
            for (i, layer) in self.layers.iter().enumerate() {
                layer.accumulate_weight_grad(&trace.inputs[i], &dz[i], &mut grad.layers[i].weight);
                layer.accumulate_bias_grad(&dz[i], &mut grad.layers[i].bias);
            }
        }
        self.layers[0].backward_input(&dz[0])
    }

    /// Input gradient of the score plus the per-layer upstream gradients
    /// needed by [`Critic::penalty_backward`].
    pub fn input_gradient(&self, trace: &CriticTrace) -> (Tensor, Vec<Tensor>) {
        let dz = self.layer_grads(trace, 1.0);
        (self.layers[0].backward_input(&dz[0]), dz)
    }

    /// Adds `d/dθ <direction, ∇_x score(x)>` to `grad`, where `layer_grads`
    /// comes from [`Critic::input_gradient`] at the same trace.
    ///
    /// The activation pattern is piecewise constant in θ, so only the
    /// explicit weight dependence of the backward pass contributes; biases
    /// receive nothing.
    pub fn penalty_backward(
        &self,
        trace: &CriticTrace,
        layer_grads: &[Tensor],
        direction: &Tensor,
        grad: &mut Critic,
    ) {
        let n = self.layers.len();
        let mut psi = direction.clone();
        for i in 0..n {
            self.layers[i].accumulate_weight_grad(&psi, &layer_grads[i], &mut grad.layers[i].weight);
            if i + 1 < n {
                psi = self.layers[i].forward_linear(&psi);
                for (v, &p) in psi.data_mut().iter_mut().zip(trace.pre[i].data()) {
                    *v *= leaky_relu_grad(p, self.leaky_slope);
                }
            }
        }
    }
}

impl Parameters for Critic {
    fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice()));
            out.push((format!("layer{i}.bias"), l.bias.as_slice()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Critic {
            layers: self.layers.iter().map(Conv::zeros_like).collect(),
            leaky_slope: self.leaky_slope,
        }
    }
}

/// The family of per-scale critics and the optional shared front-end.
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub critics: Vec<Critic>,
    pub front_end: Option<Arc<FrontEnd>>,
    resolution: usize,
}

/// Trace of one image through front-end and critic.
#[derive(Debug)]
pub struct ScoreTrace {
    front: Option<FrontEndTrace>,
    critic: CriticTrace,
}

/// Gradient penalty `(‖∇D‖ - 1)^2` at one point and the norm it came from.
#[derive(Debug)]
pub struct PenaltyTerm {
    pub value: f64,
    pub grad_norm: f64,
}

impl Discriminators {
    pub fn new(
        scales: usize,
        resolution: usize,
        config: &CriticConfig,
        front_end: Option<Arc<FrontEnd>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(scales >= 1, "at least one critic is required");
        let in_channels = if front_end.is_some() { OUT_CHANNELS } else { 3 };
        let critics = (0..scales)
            .map(|_| Critic::new(in_channels, config, rng))
            .collect::<Result<_>>()?;
        Ok(Discriminators {
            critics,
            front_end,
            resolution,
        })
    }

    pub fn from_critics(critics: Vec<Critic>, resolution: usize, front_end: Option<Arc<FrontEnd>>) -> Result<Self> {
        ensure!(!critics.is_empty(), "at least one critic is required");
        let in_channels = if front_end.is_some() { OUT_CHANNELS } else { 3 };
        ensure!(
            critics.iter().all(|c| c.in_channels() == in_channels),
            "critics must take {in_channels} input channels"
        );
        Ok(Discriminators {
            critics,
            front_end,
            resolution,
        })
    }

    pub fn scales(&self) -> usize {
        self.critics.len()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn critic(&self, n: usize) -> Result<&Critic> {
        ensure!(
            (1..=self.scales()).contains(&n),
            "scale index {n} outside [1, {}]",
            self.scales()
        );
        Ok(&self.critics[n - 1])
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let r = self.resolution;
        ensure!(
            x.shape() == [3, 1, r, r],
            "critic input must be a {r}x{r} RGB image, got {:?}",
            x.shape()
        );
        Ok(())
    }

    /// Front-end features (or the image itself when disabled).
    pub fn front_end_features(&self, x: &Tensor) -> Result<(Tensor, Option<FrontEndTrace>)> {
        match &self.front_end {
            Some(fe) => {
                let (f, t) = fe.forward(x)?;
                Ok((f, Some(t)))
            }
            None => Ok((x.clone(), None)),
        }
    }

    pub fn forward(&self, n: usize, x: &Tensor) -> Result<(f64, ScoreTrace)> {
        self.check_image(x)?;
        let critic = self.critic(n)?;
        let (features, front) = self.front_end_features(x)?;
        let (score, trace) = critic.forward(&features);
        Ok((score, ScoreTrace { front, critic: trace }))
    }

    pub fn score(&self, n: usize, batch: &[Tensor]) -> Result<Vec<f64>> {
        batch.iter().map(|x| Ok(self.forward(n, x)?.0)).collect()
    }

    /// Backpropagates `dscore` through critic `n` (and the frozen front-end
    /// when the input gradient is requested).
    pub fn backward(
        &self,
        n: usize,
        trace: &ScoreTrace,
        dscore: f64,
        grad: Option<&mut Critic>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let critic = self.critic(n)?;
        if !need_input_grad {
            if let Some(grad) = grad {
                let dz = critic.layer_grads(&trace.critic, dscore);
                for (i, layer) in critic.layers.iter().enumerate() {
                    layer.accumulate_weight_grad(&trace.critic.inputs[i], &dz[i], &mut grad.layers[i].weight);
                    layer.accumulate_bias_grad(&dz[i], &mut grad.layers[i].bias);
                }
            }
            return Ok(None);
        }
        let dfeat = critic.backward(&trace.critic, dscore, grad);
        Ok(Some(match (&self.front_end, &trace.front) {
            (Some(fe), Some(t)) => fe.backward(t, &dfeat),
            _ => dfeat,
        }))
    }

    /// `∇_x D_n(x)` for one image.
    pub fn input_gradient(&self, n: usize, x: &Tensor) -> Result<Tensor> {
        let (_, trace) = self.forward(n, x)?;
        Ok(self.backward(n, &trace, 1.0, None, true)?.expect("input gradient"))
    }

    /// Evaluates `(‖∇_x D_n(x)‖ - 1)^2` at `x` and, when `grad` is given,
    /// adds `weight` times its parameter gradient to it.
    pub fn penalty_term(&self, n: usize, x: &Tensor, weight: f64, grad: Option<&mut Critic>) -> Result<PenaltyTerm> {
        let (_, trace) = self.forward(n, x)?;
        let critic = self.critic(n)?;
        let (gfeat, layer_grads) = critic.input_gradient(&trace.critic);
        let g = match (&self.front_end, &trace.front) {
            (Some(fe), Some(t)) => fe.backward(t, &gfeat),
            _ => gfeat,
        };
        let norm = g.norm();
        let value = (norm - 1.0).powi(2);
        if let Some(grad) = grad.filter(|_| weight != 0.0 && norm > 0.0) {
            // d value / d g = 2 (‖g‖ - 1) g / ‖g‖
            let mut dir = g;
            dir.scale(weight * 2.0 * (norm - 1.0) / norm);
            let dir = match (&self.front_end, &trace.front) {
                (Some(fe), Some(t)) => fe.jvp(t, &dir),
                _ => dir,
            };
            critic.penalty_backward(&trace.critic, &layer_grads, &dir, grad);
        }
        Ok(PenaltyTerm { value, grad_norm: norm })
    }
}
