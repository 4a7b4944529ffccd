//! Zero-padded, stride-1 convolution over `(C, D, H, W)` grids.
//!
//! 2D convolution is the special case `kernel = [1, k, k]` on tensors with
//! `depth == 1`. Output spatial size always equals input spatial size.

use rand::Rng;

use super::gemm::{gemm, Layout};
use crate::tensor::Tensor;

/// Upper bound on the number of `f64` cells in one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    /// `[out][in][kd][kh][kw]`
    pub weight: Vec<f64>,
    /// Empty when the layer has no bias.
    pub bias: Vec<f64>,
}

impl Conv {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            kernel.iter().all(|k| k % 2 == 1),
            "same-padding convolution needs odd kernel edges, got {kernel:?}"
        );
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = if bias {
            (0..out_channels).map(|_| rng.random_range(-bound..bound)).collect()
        } else {
            Vec::new()
        };
        Conv {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    /// He initialization for a following leaky rectifier with negative
    /// slope `slope`: weights `N(0, 2 / ((1 + slope^2) fan_in))`, zero bias.
    pub fn he_normal(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        bias: bool,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c = Conv::zeros(in_channels, out_channels, kernel, bias);
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        for w in &mut c.weight {
            *w = rng.sample(normal);
        }
        c
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: [usize; 3], bias: bool) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        Conv {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * fan_in],
            bias: if bias { vec![0.0; out_channels] } else { Vec::new() },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel, self.has_bias())
    }

    pub fn has_bias(&self) -> bool {
        !self.bias.is_empty()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    fn chunk_depth(&self, x: &Tensor) -> usize {
        let per_plane = self.fan_in() * x.height() * x.width();
        (COLS_BUDGET / per_plane.max(1)).clamp(1, x.depth().max(1))
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "convolution expects {} input channels",
            self.in_channels
        );
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.forward_linear(x);
        if self.has_bias() {
            for (co, b) in self.bias.iter().enumerate() {
                for v in y.channel_mut(co) {
                    *v += b;
                }
            }
        }
        y
    }

    /// Convolution without the bias term.
    pub fn forward_linear(&self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let [_, d, h, w] = x.shape();
        let plane = h * w;
        let mut y = Tensor::zeros([self.out_channels, d, h, w]);
        let lw = Layout::row_major(self.out_channels, self.fan_in());
        let chunk = self.chunk_depth(x);
        let mut cols = Vec::new();
        let mut z0 = 0;
        while z0 < d {
            let zn = chunk.min(d - z0);
            let p = zn * plane;
            let lc = Layout {
                rows: self.out_channels,
                cols: p,
                rs: d * plane,
                cs: 1,
            };
            let out = &mut y.data_mut()[z0 * plane..];
            if self.is_pointwise() {
                let lx = Layout {
                    rows: self.in_channels,
                    cols: p,
                    rs: d * plane,
                    cs: 1,
                };
                gemm(1.0, &self.weight, lw, &x.data()[z0 * plane..], lx, 0.0, out, lc);
            } else {
                im2col(x, self.kernel, z0, zn, &mut cols);
                let lx = Layout::row_major(self.fan_in(), p);
                gemm(1.0, &self.weight, lw, &cols, lx, 0.0, out, lc);
            }
            z0 += zn;
        }
        y
    }

    /// Accumulates `d loss / d weight` for upstream gradient `dy` at input `x`.
    pub fn accumulate_weight_grad(&self, x: &Tensor, dy: &Tensor, dweight: &mut [f64]) {
        self.check_input(x);
        let [_, d, h, w] = x.shape();
        assert_eq!(dy.shape(), [self.out_channels, d, h, w]);
        let plane = h * w;
        let lw = Layout::row_major(self.out_channels, self.fan_in());
        let chunk = self.chunk_depth(x);
        let mut cols = Vec::new();
        let mut z0 = 0;
        while z0 < d {
            let zn = chunk.min(d - z0);
            let p = zn * plane;
            let ldy = Layout {
                rows: self.out_channels,
                cols: p,
                rs: d * plane,
                cs: 1,
            };
            let dys = &dy.data()[z0 * plane..];
            if self.is_pointwise() {
                let lxt = Layout {
                    rows: p,
                    cols: self.in_channels,
                    rs: 1,
                    cs: d * plane,
                };
                gemm(1.0, dys, ldy, &x.data()[z0 * plane..], lxt, 1.0, dweight, lw);
            } else {
                im2col(x, self.kernel, z0, zn, &mut cols);
                let lct = Layout::row_major(self.fan_in(), p).transposed();
                gemm(1.0, dys, ldy, &cols, lct, 1.0, dweight, lw);
            }
            z0 += zn;
        }
    }

    pub fn accumulate_bias_grad(&self, dy: &Tensor, dbias: &mut [f64]) {
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += dy.channel(co).iter().sum::<f64>();
        }
    }

    /// `d loss / d x` for upstream gradient `dy` (the adjoint of [`Conv::forward_linear`]).
    pub fn backward_input(&self, dy: &Tensor) -> Tensor {
        assert_eq!(dy.channels(), self.out_channels);
        let [_, d, h, w] = dy.shape();
        let plane = h * w;
        let mut dx = Tensor::zeros([self.in_channels, d, h, w]);
        let lwt = Layout::row_major(self.out_channels, self.fan_in()).transposed();
        let per_plane = self.fan_in() * plane;
        let chunk = (COLS_BUDGET / per_plane.max(1)).clamp(1, d.max(1));
        let mut dcols = Vec::new();
        let mut z0 = 0;
        while z0 < d {
            let zn = chunk.min(d - z0);
            let p = zn * plane;
            let ldy = Layout {
                rows: self.out_channels,
                cols: p,
                rs: d * plane,
                cs: 1,
            };
            let dys = &dy.data()[z0 * plane..];
            if self.is_pointwise() {
                let ldx = Layout {
                    rows: self.in_channels,
                    cols: p,
                    rs: d * plane,
                    cs: 1,
                };
                gemm(1.0, &self.weight, lwt, dys, ldy, 0.0, &mut dx.data_mut()[z0 * plane..], ldx);
            } else {
                dcols.clear();
                dcols.resize(self.fan_in() * p, 0.0);
                gemm(
                    1.0,
                    &self.weight,
                    lwt,
                    dys,
                    ldy,
                    0.0,
                    &mut dcols,
                    Layout::row_major(self.fan_in(), p),
                );
                col2im_add(&dcols, self.kernel, z0, zn, &mut dx);
            }
            z0 += zn;
        }
        dx
    }
}

fn padding(kernel: [usize; 3]) -> [isize; 3] {
    [
        (kernel[0] / 2) as isize,
        (kernel[1] / 2) as isize,
        (kernel[2] / 2) as isize,
    ]
}

/// Visits the contiguous `(row, col_lo, col_hi, src_offset)` runs shared by im2col and col2im.
fn for_each_run(
    shape: [usize; 4],
    kernel: [usize; 3],
    z0: usize,
    zn: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let [c, d, h, w] = shape;
    let [kd, kh, kw] = kernel;
    let [pd, ph, pw] = padding(kernel);
    let kvol = kd * kh * kw;
    for ci in 0..c {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ci * kvol + (kz * kh + ky) * kw + kx;
                    let dx = kx as isize - pw;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for zi in 0..zn {
                        let zz = (z0 + zi) as isize + kz as isize - pd;
                        if zz < 0 || zz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let yy = y as isize + ky as isize - ph;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let src = ((ci * d + zz as usize) * h + yy as usize) * w;
                            let dst_col = (zi * h + y) * w;
                            f(
                                row,
                                dst_col + x_lo,
                                dst_col + x_hi,
                                src + (x_lo as isize + dx) as usize,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &Tensor, kernel: [usize; 3], z0: usize, zn: usize, cols: &mut Vec<f64>) {
    let [c, _, h, w] = x.shape();
    let p = zn * h * w;
    let rows = c * kernel.iter().product::<usize>();
    cols.clear();
    cols.resize(rows * p, 0.0);
    let src = x.data();
    for_each_run(x.shape(), kernel, z0, zn, |row, lo, hi, s| {
        let base = row * p;
        cols[base + lo..base + hi].copy_from_slice(&src[s..s + (hi - lo)]);
    });
}

fn col2im_add(cols: &[f64], kernel: [usize; 3], z0: usize, zn: usize, dx: &mut Tensor) {
    let [_, _, h, w] = dx.shape();
    let p = zn * h * w;
    let shape = dx.shape();
    let dst = dx.data_mut();
    for_each_run(shape, kernel, z0, zn, |row, lo, hi, s| {
        let base = row * p;
        for (d, v) in dst[s..s + (hi - lo)].iter_mut().zip(&cols[base + lo..base + hi]) {
            *d += v;
        }
    });
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(conv: &Conv, x: &Tensor) -> Tensor {
        let [_, d, h, w] = x.shape();
        let [kd, kh, kw] = conv.kernel;
        let [pd, ph, pw] = padding(conv.kernel);
        Tensor::from_fn([conv.out_channels, d, h, w], |co, z, y, xx| {
            let mut acc = if conv.has_bias() { conv.bias[co] } else { 0.0 };
            for ci in 0..conv.in_channels {
                for a in 0..kd {
                    for b in 0..kh {
                        for c in 0..kw {
                            let (sz, sy, sx) = (
                                z as isize + a as isize - pd,
                                y as isize + b as isize - ph,
                                xx as isize + c as isize - pw,
                            );
                            if sz < 0 || sy < 0 || sx < 0 {
                                continue;
                            }
                            let (sz, sy, sx) = (sz as usize, sy as usize, sx as usize);
                            if sz >= d || sy >= h || sx >= w {
                                continue;
                            }
                            let wi = (((co * conv.in_channels + ci) * kd + a) * kh + b) * kw + c;
                            acc += conv.weight[wi] * x.at(ci, sz, sy, sx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel in [[3, 3, 3], [1, 1, 1], [1, 3, 3], [3, 1, 3]] {
            let conv = Conv::new(2, 3, kernel, true, &mut rng);
            let x = Tensor::randn([2, 4, 5, 6], &mut rng);
            let got = conv.forward(&x);
            let want = naive(&conv, &x);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{kernel:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> and d<conv_W(x), g>/dW matches the weight gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kernel in [[3, 3, 3], [1, 1, 1], [1, 3, 3]] {
            let conv = Conv::new(3, 2, kernel, false, &mut rng);
            let x = Tensor::randn([3, 3, 4, 5], &mut rng);
            let g = Tensor::randn([2, 3, 4, 5], &mut rng);
            let lhs = conv.forward_linear(&x).dot(&g);
            let rhs = x.dot(&conv.backward_input(&g));
            assert!((lhs - rhs).abs() < 1e-10);

            let mut dw = vec![0.0; conv.weight.len()];
            conv.accumulate_weight_grad(&x, &g, &mut dw);
            let explicit: f64 = dw.iter().zip(&conv.weight).map(|(a, b)| a * b).sum();
            assert!((explicit - lhs).abs() < 1e-10);
        }
    }

    #[test]
    fn chunked_path_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv::new(16, 2, [3, 3, 3], true, &mut rng);
        // 16*27*48*48 > COLS_BUDGET / 16, forcing several depth chunks.
        let x = Tensor::randn([16, 12, 48, 48], &mut rng);
        assert!(conv.chunk_depth(&x) < 12);
        let got = conv.forward(&x);
        let want = naive(&conv, &x);
        let err = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-11, "max error {err}");
    }
}
