//! Spatial resampling: nearest-neighbor upsampling, bilinear resizing,
//! max pooling and trilinear point sampling.

use crate::tensor::Tensor;

/// Doubles every spatial extent of a `(C, D, H, W)` grid by voxel replication.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let [c, d, h, w] = x.shape();
    Tensor::from_fn([c, 2 * d, 2 * h, 2 * w], |ci, z, y, xx| x.at(ci, z / 2, y / 2, xx / 2))
}

/// Adjoint of [`upsample_nearest2`]: sums each 2x2x2 block.
pub fn upsample_nearest2_backward(dy: &Tensor) -> Tensor {
    let [c, d, h, w] = dy.shape();
    let mut dx = Tensor::zeros([c, d / 2, h / 2, w / 2]);
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = dx.offset(ci, z / 2, y / 2, x / 2);
                    dx.data_mut()[i] += dy.at(ci, z, y, x);
                }
            }
        }
    }
    dx
}

/// Linear interpolation taps along one axis, using half-pixel centers and
/// edge clamping.
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(pos - lo as f64);
        }
        taps
    }
}

/// Bilinear resize of an image batch element `(C, 1, H, W)` to `(C, 1, out_h, out_w)`.
///
/// Each output is a convex combination of source pixels, so the value range
/// never expands. Equal sizes are an exact copy.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [c, d, h, w] = x.shape();
    assert_eq!(d, 1, "bilinear resize expects 2D images");
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = Taps::new(h, out_h);
    let tx = Taps::new(w, out_w);
    Tensor::from_fn([c, 1, out_h, out_w], |ci, _, y, xx| {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        let (x0, x1, fx) = (tx.lo[xx], tx.hi[xx], tx.frac[xx]);
        let top = (1.0 - fx) * x.at(ci, 0, y0, x0) + fx * x.at(ci, 0, y0, x1);
        let bottom = (1.0 - fx) * x.at(ci, 0, y1, x0) + fx * x.at(ci, 0, y1, x1);
        (1.0 - fy) * top + fy * bottom
    })
}

/// Adjoint of [`resize_bilinear`] from an `(C, 1, out_h, out_w)` gradient back to `(C, 1, h, w)`.
pub fn resize_bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [c, _, out_h, out_w] = dy.shape();
    if (h, w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = Taps::new(h, out_h);
    let tx = Taps::new(w, out_w);
    let mut dx = Tensor::zeros([c, 1, h, w]);
    for ci in 0..c {
        for y in 0..out_h {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for xx in 0..out_w {
                let (x0, x1, fx) = (tx.lo[xx], tx.hi[xx], tx.frac[xx]);
                let g = dy.at(ci, 0, y, xx);
                let d = dx.data_mut();
                let row0 = (ci * h + y0) * w;
                let row1 = (ci * h + y1) * w;
                d[row0 + x0] += g * (1.0 - fy) * (1.0 - fx);
                d[row0 + x1] += g * (1.0 - fy) * fx;
                d[row1 + x0] += g * fy * (1.0 - fx);
                d[row1 + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// 2x2 stride-2 max pooling of a 2D image; returns the pooled map and, for
/// each output cell, the flat source index of the selected maximum.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [c, d, h, w] = x.shape();
    assert_eq!(d, 1, "max pooling expects 2D images");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([c, 1, oh, ow]);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = x.offset(ci, 0, 2 * y, 2 * xx);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = x.offset(ci, 0, 2 * y + dy, 2 * xx + dx);
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.set(ci, 0, y, xx, x.data()[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Gathers `src` at the pooling selection (the pooling Jacobian applied to `src`).
pub fn max_pool2_select(src: &Tensor, argmax: &[usize], out_shape: [usize; 4]) -> Tensor {
    Tensor::from_vec(out_shape, argmax.iter().map(|&i| src.data()[i]).collect())
}

/// Scatters a pooled gradient back to the selected source positions.
pub fn max_pool2_backward(dy: &Tensor, argmax: &[usize], in_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (&i, g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Trilinear interpolation of every channel at a continuous position given in
/// voxel-center coordinates `(z, y, x)`; positions are clamped to the grid.
pub fn trilinear(v: &Tensor, pos: [f64; 3], out: &mut [f64]) {
    let dims = [v.depth(), v.height(), v.width()];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let p = pos[a].clamp(0.0, (dims[a] - 1) as f64);
        lo[a] = p.floor() as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = p - lo[a] as f64;
    }
    for (c, o) in out.iter_mut().enumerate().take(v.channels()) {
        let mut acc = 0.0;
        for corner in 0..8 {
            let pick = |a: usize| corner >> (2 - a) & 1 == 1;
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    weight *= t[a];
                    idx[a] = hi[a];
                } else {
                    weight *= 1.0 - t[a];
                    idx[a] = lo[a];
                }
            }
            if weight != 0.0 {
                acc += weight * v.at(c, idx[0], idx[1], idx[2]);
            }
        }
        *o = acc;
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn checkerboard_upsample_matches_hand_weights() {
        // 2x2 checkerboard [[0,1],[1,0]] resized to 4x4. Along each axis the
        // half-pixel taps give weights (1,0), (.75,.25), (.25,.75), (0,1).
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let y = resize_bilinear(&x, 4, 4);
        let a = [1.0, 0.75, 0.25, 0.0];
        for i in 0..4 {
            for j in 0..4 {
                let (wy0, wx0) = (a[i], a[j]);
                let want = wy0 * (1.0 - wx0) + (1.0 - wy0) * wx0;
                assert!((y.at(0, 0, i, j) - want).abs() < 1e-15);
            }
        }
        assert_eq!(y.at(0, 0, 1, 1), 0.375);
        assert_eq!(y.at(0, 0, 0, 3), 1.0);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([3, 1, 5, 7], &mut rng);
        let g = Tensor::randn([3, 1, 16, 16], &mut rng);
        let lhs = resize_bilinear(&x, 16, 16).dot(&g);
        let rhs = x.dot(&resize_bilinear_backward(&g, 5, 7));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn nearest_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn([2, 2, 3, 2], &mut rng);
        let g = Tensor::randn([2, 4, 6, 4], &mut rng);
        let lhs = upsample_nearest2(&x).dot(&g);
        let rhs = x.dot(&upsample_nearest2_backward(&g));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn trilinear_hits_voxel_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Tensor::randn([3, 3, 4, 5], &mut rng);
        let mut out = [0.0; 3];
        trilinear(&v, [2.0, 1.0, 4.0], &mut out);
        for c in 0..3 {
            assert_eq!(out[c], v.at(c, 2, 1, 4));
        }
    }
}
