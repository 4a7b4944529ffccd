//! Adversarial objectives for one critic scale.
//!
//! `L_G = -mean D(u)` and `L_D = mean D(u) - mean D(x) + λ mean (‖∇_r D(r)‖ - 1)^2`
//! with `r = ε u + (1 - ε) x`, one `ε ~ U[0, 1)` per pair drawn in batch order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{Critic, Discriminators};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// One gradient-penalty interpolate.
#[derive(Clone, Debug, PartialEq)]
pub struct GpSample {
    pub epsilon: f64,
    pub r: Tensor,
}

impl GpSample {
    pub fn new(u: &Tensor, x: &Tensor, epsilon: f64) -> Self {
        assert_eq!(u.shape(), x.shape());
        let data = u
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| epsilon * a + (1.0 - epsilon) * b)
            .collect();
        GpSample {
            epsilon,
            r: Tensor::from_vec(u.shape(), data),
        }
    }

    pub fn draw(u: &Tensor, x: &Tensor, rng: &mut impl Rng) -> Self {
        GpSample::new(u, x, rng.random::<f64>())
    }
}

/// Loss terms of one critic update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticLosses {
    pub loss: f64,
    pub fake_score: f64,
    pub real_score: f64,
    pub penalty: f64,
}

impl CriticLosses {
    pub fn is_finite(&self) -> bool {
        [self.loss, self.fake_score, self.real_score, self.penalty]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_pairs(u: &[Tensor], x: &[Tensor]) -> Result<()> {
    ensure!(!u.is_empty(), "fake batch is empty");
    ensure!(
        u.len() == x.len(),
        "fake and real batches differ in size ({} vs {})",
        u.len(),
        x.len()
    );
    ensure!(
        u.iter().zip(x).all(|(a, b)| a.shape() == b.shape()),
        "fake and real images differ in shape"
    );
    Ok(())
}

pub fn generator_loss(d: &Discriminators, n: usize, u: &[Tensor]) -> Result<f64> {
    ensure!(!u.is_empty(), "fake batch is empty");
    let scores = d.score(n, u)?;
    Ok(-scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Generator loss and its gradient with respect to every fake image.
pub fn generator_objective(d: &Discriminators, n: usize, u: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    ensure!(!u.is_empty(), "fake batch is empty");
    let b = u.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(u.len());
    for img in u {
        let (score, trace) = d.forward(n, img)?;
        loss -= score;
        grads.push(d.backward(n, &trace, -1.0 / b, None, true)?.expect("input gradient"));
    }
    Ok((loss / b, grads))
}

/// Mean `(‖∇_r D_n(r)‖ - 1)^2` over the pairs (without the λ factor).
pub fn gradient_penalty(d: &Discriminators, n: usize, u: &[Tensor], x: &[Tensor], rng: &mut impl Rng) -> Result<f64> {
    check_pairs(u, x)?;
    let mut total = 0.0;
    for (a, b) in u.iter().zip(x) {
        let s = GpSample::draw(a, b, rng);
        total += d.penalty_term(n, &s.r, 0.0, None)?.value;
    }
    Ok(total / u.len() as f64)
}

pub fn discriminator_loss(
    d: &Discriminators,
    n: usize,
    u: &[Tensor],
    x: &[Tensor],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    Ok(critic_objective(d, n, u, x, lambda, rng, None)?.loss)
}

/// Critic loss terms; when `grad` is given the parameter gradient of the
/// loss is added to it. Consumes the same random draws as
/// [`discriminator_loss`].
pub fn critic_objective(
    d: &Discriminators,
    n: usize,
    u: &[Tensor],
    x: &[Tensor],
    lambda: f64,
    rng: &mut impl Rng,
    mut grad: Option<&mut Critic>,
) -> Result<CriticLosses> {
    check_pairs(u, x)?;
    let b = u.len() as f64;
    let (mut fake, mut real, mut penalty) = (0.0, 0.0, 0.0);
    for (a, c) in u.iter().zip(x) {
        let (s, trace) = d.forward(n, a)?;
        fake += s;
        if let Some(g) = grad.as_deref_mut() {
            d.backward(n, &trace, 1.0 / b, Some(g), false)?;
        }
        let (s, trace) = d.forward(n, c)?;
        real += s;
        if let Some(g) = grad.as_deref_mut() {
            d.backward(n, &trace, -1.0 / b, Some(g), false)?;
        }
        let gp = GpSample::draw(a, c, rng);
        penalty += d.penalty_term(n, &gp.r, lambda / b, grad.as_deref_mut())?.value;
    }
    let (fake, real, penalty) = (fake / b, real / b, penalty / b);
    Ok(CriticLosses {
        loss: fake - real + lambda * penalty,
        fake_score: fake,
        real_score: real,
        penalty,
    })
}
