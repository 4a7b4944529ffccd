use crate::tensor::Tensor;

#[inline]
pub fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

#[inline]
pub fn leaky_relu_grad(pre: f64, slope: f64) -> f64 {
    if pre >= 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn leaky_relu_forward(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| leaky_relu(v, slope))
}

/// Multiplies `dy` by the activation derivative at pre-activation `pre`.
pub fn leaky_relu_backward(pre: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    let mut out = dy.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        *o *= leaky_relu_grad(p, slope);
    }
    out
}

/// `(tanh(x) + 1) / 2`, mapping the real line onto `(0, 1)`.
pub fn unit_squash(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * (v.tanh() + 1.0))
}

/// Backward of [`unit_squash`] given its output `y`.
pub fn unit_squash_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut out = dy.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(y.data()) {
        // d/dx (tanh x + 1)/2 = (1 - tanh^2)/2 = 2 s (1 - s)
        *o *= 2.0 * s * (1.0 - s);
    }
    out
}
