//! Dense channel-major grids used for volumes, images and feature maps.

use rand::Rng;
use rand_distr::StandardNormal;

/// A dense `(channels, depth, height, width)` grid of `f64`.
///
/// Images are stored with `depth == 1`. Storage is row-major with `width`
/// varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [c, d, h, w] = shape;
        let mut data = Vec::with_capacity(c * d * h * w);
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ci, z, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// I.i.d. standard-normal entries.
    pub fn randn(shape: [usize; 4], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self::zeros([channels, 1, height, width])
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of spatial sites per channel.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.shape[1] + z) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(c, z, y, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack two tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape[1..], b.shape[1..], "spatial shapes differ");
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            shape: [a.shape[0] + b.shape[0], a.shape[1], a.shape[2], a.shape[3]],
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let [c, d, h, w] = self.shape;
        assert!(first <= c);
        let cut = first * self.plane_len();
        (
            Tensor::from_vec([first, d, h, w], self.data[..cut].to_vec()),
            Tensor::from_vec([c - first, d, h, w], self.data[cut..].to_vec()),
        )
    }

    /// Spatial window `[z0, z0+d) x [y0, y0+h) x [x0, x0+w)` across all channels.
    pub fn window(&self, origin: [usize; 3], size: [usize; 3]) -> Tensor {
        let [z0, y0, x0] = origin;
        let [d, h, w] = size;
        assert!(z0 + d <= self.depth() && y0 + h <= self.height() && x0 + w <= self.width());
        Tensor::from_fn([self.channels(), d, h, w], |c, z, y, x| {
            self.at(c, z0 + z, y0 + y, x0 + x)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::from_fn([2, 2, 3, 1], |c, z, y, _| (c * 100 + z * 10 + y) as f64);
        let b = Tensor::full([1, 2, 3, 1], -1.0);
        let cat = Tensor::concat_channels(&a, &b);
        assert_eq!(cat.shape(), [3, 2, 3, 1]);
        assert_eq!(cat.at(2, 1, 2, 0), -1.0);
        let (a2, b2) = cat.split_channels(2);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn window_reads_expected_region() {
        let t = Tensor::from_fn([1, 4, 4, 4], |_, z, y, x| (z * 16 + y * 4 + x) as f64);
        let w = t.window([1, 2, 3], [2, 2, 1]);
        assert_eq!(w.data(), &[27.0, 31.0, 43.0, 47.0]);
    }
}
