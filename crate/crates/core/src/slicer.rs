//! Orthogonal and 45-degree oblique cross-sections of volumes.
//!
//! Orthogonal slice image layouts (row, column):
//! * `Z` at `i`: `(y, x)`
//! * `Y` at `i`: `(z, x)`
//! * `X` at `i`: `(z, y)`
//!
//! Every extraction has an adjoint (`scatter_*`) so gradients on slice images
//! can be pushed back onto the volume.

use std::f64::consts::SQRT_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::resample::trilinear;
use crate::tensor::Tensor;
use crate::volume::{Axis, Volume};

/// Where a slice was taken.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlicePlane {
    Orthogonal { axis: Axis, index: usize },
    /// The plane through `center + offset * normal`, whose normal is the
    /// diagonal between the two axes other than `rotation_axis`.
    Oblique45 { rotation_axis: Axis, offset: f64 },
}

/// A square RGB cross-section stored as a `(3, 1, S, S)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub pixels: Tensor,
    pub plane: SlicePlane,
}

fn check_cubic(v: &Tensor) -> Result<usize> {
    let [_, d, h, w] = v.shape();
    ensure!(d == h && h == w, "expected a cubic grid, got {d}x{h}x{w}");
    Ok(d)
}

/// Orthogonal plane of a raw `(C, S, S, S)` grid.
pub fn extract_orthogonal(v: &Tensor, axis: Axis, index: usize) -> Result<Tensor> {
    let s = check_cubic(v)?;
    ensure!(index < s, "slice index {index} outside [0, {}]", s - 1);
    let c = v.channels();
    Ok(match axis {
        Axis::Z => v.window([index, 0, 0], [1, s, s]),
        Axis::Y => Tensor::from_fn([c, 1, s, s], |ci, _, r, col| v.at(ci, r, index, col)),
        Axis::X => Tensor::from_fn([c, 1, s, s], |ci, _, r, col| v.at(ci, r, col, index)),
    })
}

/// Adds an orthogonal slice gradient back into a volume gradient.
pub fn scatter_orthogonal(grad: &Tensor, axis: Axis, index: usize, dvol: &mut Tensor) {
    let s = dvol.depth();
    for ci in 0..dvol.channels() {
        for r in 0..s {
            for col in 0..s {
                let g = grad.at(ci, 0, r, col);
                let i = match axis {
                    Axis::Z => dvol.offset(ci, index, r, col),
                    Axis::Y => dvol.offset(ci, r, index, col),
                    Axis::X => dvol.offset(ci, r, col, index),
                };
                dvol.data_mut()[i] += g;
            }
        }
    }
}

/// In-plane basis `(column direction, row direction, normal)` in `(x, y, z)` order.
fn oblique_frame(rotation_axis: Axis) -> [[f64; 3]; 3] {
    let r = 1.0 / SQRT_2;
    match rotation_axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, r, -r], [0.0, r, r]],
        Axis::Y => [[0.0, 1.0, 0.0], [r, 0.0, -r], [r, 0.0, r]],
        Axis::Z => [[0.0, 0.0, 1.0], [r, -r, 0.0], [r, r, 0.0]],
    }
}

/// Largest offset for which the sampled square keeps its full side `S - 1`.
pub fn max_full_oblique_offset(edge: usize) -> f64 {
    (edge as f64 - 1.0) / 2.0 * (SQRT_2 - 1.0)
}

/// Sample positions (voxel-center coordinates, `(z, y, x)` order) of an
/// oblique slice: an `S x S` grid on the largest centered square that fits
/// inside the plane's intersection with the volume.
fn oblique_points(edge: usize, rotation_axis: Axis, offset: f64) -> Result<Vec<[f64; 3]>> {
    ensure!(offset.is_finite(), "oblique offset must be finite");
    let half = (edge as f64 - 1.0) / 2.0;
    let reach = half * SQRT_2 - offset.abs();
    if edge > 1 && reach <= 0.0 || edge == 1 && offset != 0.0 {
        return Err(Error::Validation(format!(
            "45-degree plane at offset {offset} misses a volume of edge {edge}"
        )));
    }
    let a = half.min(reach);
    let [e1, e2, n] = oblique_frame(rotation_axis);
    let step = if edge > 1 { 2.0 * a / (edge as f64 - 1.0) } else { 0.0 };
    let mut pts = Vec::with_capacity(edge * edge);
    for row in 0..edge {
        let t = -a + step * row as f64;
        for col in 0..edge {
            let s = -a + step * col as f64;
            let p: [f64; 3] =
                std::array::from_fn(|k| half + offset * n[k] + s * e1[k] + t * e2[k]);
            pts.push([p[2], p[1], p[0]]);
        }
    }
    Ok(pts)
}

/// Trilinear taps `(flat spatial index, weight)` for one sample position.
fn taps(edge: usize, pos: [f64; 3]) -> [(usize, f64); 8] {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let p = pos[a].clamp(0.0, (edge - 1) as f64);
        lo[a] = p.floor() as usize;
        hi[a] = (lo[a] + 1).min(edge - 1);
        t[a] = p - lo[a] as f64;
    }
    std::array::from_fn(|corner| {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if corner >> (2 - a) & 1 == 1 {
                w *= t[a];
                idx[a] = hi[a];
            } else {
                w *= 1.0 - t[a];
                idx[a] = lo[a];
            }
        }
        ((idx[0] * edge + idx[1]) * edge + idx[2], w)
    })
}

pub fn extract_oblique45(v: &Tensor, rotation_axis: Axis, offset: f64) -> Result<Tensor> {
    let s = check_cubic(v)?;
    let pts = oblique_points(s, rotation_axis, offset)?;
    let c = v.channels();
    let mut out = Tensor::zeros([c, 1, s, s]);
    let mut buf = vec![0.0; c];
    for (p, pos) in pts.iter().enumerate() {
        trilinear(v, *pos, &mut buf);
        for (ci, b) in buf.iter().enumerate() {
            out.data_mut()[ci * s * s + p] = *b;
        }
    }
    Ok(out)
}

pub fn scatter_oblique45(grad: &Tensor, rotation_axis: Axis, offset: f64, dvol: &mut Tensor) -> Result<()> {
    let s = dvol.depth();
    let pts = oblique_points(s, rotation_axis, offset)?;
    let plane = dvol.plane_len();
    for (p, pos) in pts.iter().enumerate() {
        for (idx, w) in taps(s, *pos) {
            if w == 0.0 {
                continue;
            }
            for ci in 0..dvol.channels() {
                let g = grad.data()[ci * s * s + p];
                dvol.data_mut()[ci * plane + idx] += w * g;
            }
        }
    }
    Ok(())
}

pub fn extract(v: &Tensor, plane: SlicePlane) -> Result<Tensor> {
    match plane {
        SlicePlane::Orthogonal { axis, index } => extract_orthogonal(v, axis, index),
        SlicePlane::Oblique45 {
            rotation_axis,
            offset,
        } => extract_oblique45(v, rotation_axis, offset),
    }
}

/// Adjoint of [`extract`].
pub fn scatter(grad: &Tensor, plane: SlicePlane, dvol: &mut Tensor) -> Result<()> {
    match plane {
        SlicePlane::Orthogonal { axis, index } => {
            scatter_orthogonal(grad, axis, index, dvol);
            Ok(())
        }
        SlicePlane::Oblique45 {
            rotation_axis,
            offset,
        } => scatter_oblique45(grad, rotation_axis, offset, dvol),
    }
}

pub fn slice_at(v: &Volume, axis: Axis, index: usize) -> Result<Slice> {
    Ok(Slice {
        pixels: extract_orthogonal(v.tensor(), axis, index)?,
        plane: SlicePlane::Orthogonal { axis, index },
    })
}

/// 45-degree slice rotated about `rotation_axis`, sampled by trilinear
/// interpolation. With `rng`, the given offset is ignored and one is drawn
/// uniformly from `[-m, m]`, `m = max_full_oblique_offset(S)`.
pub fn slice_oblique45(
    v: &Volume,
    rotation_axis: Axis,
    offset: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Slice> {
    let offset = match rng {
        Some(rng) => random_oblique_offset(v.edge(), rng),
        None => offset,
    };
    Ok(Slice {
        pixels: extract_oblique45(v.tensor(), rotation_axis, offset)?,
        plane: SlicePlane::Oblique45 {
            rotation_axis,
            offset,
        },
    })
}

fn random_oblique_offset<R: Rng + ?Sized>(edge: usize, rng: &mut R) -> f64 {
    let m = max_full_oblique_offset(edge);
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

/// Draws a plane: orthogonal with axis uniform over `axes` and index uniform
/// over `[0, S-1]`; when `oblique` is set, a 45-degree plane is one more
/// equally likely outcome alongside the axes.
pub fn sample_plane<R: Rng + ?Sized>(edge: usize, axes: &[Axis], oblique: bool, rng: &mut R) -> Result<SlicePlane> {
    ensure!(!axes.is_empty(), "slice axis set must be nonempty");
    ensure!(edge >= 1, "volume edge must be positive");
    let choices = axes.len() + usize::from(oblique);
    let pick = rng.random_range(0..choices);
    if pick < axes.len() {
        let index = rng.random_range(0..edge);
        Ok(SlicePlane::Orthogonal {
            axis: axes[pick],
            index,
        })
    } else {
        let rotation_axis = Axis::ALL[rng.random_range(0..3)];
        let offset = random_oblique_offset(edge, rng);
        Ok(SlicePlane::Oblique45 {
            rotation_axis,
            offset,
        })
    }
}

/// `count` independent orthogonal slices.
pub fn sample_slices<R: Rng + ?Sized>(v: &Volume, axes: &[Axis], count: usize, rng: &mut R) -> Result<Vec<Slice>> {
    ensure!(count >= 1, "slice count must be at least 1");
    (0..count)
        .map(|_| {
            let plane = sample_plane(v.edge(), axes, false, rng)?;
            Ok(Slice {
                pixels: extract(v.tensor(), plane)?,
                plane,
            })
        })
        .collect()
}

/// Trilinear sample of `v` at a continuous voxel-center position `(x, y, z)`.
pub fn sample_point(v: &Volume, pos: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    trilinear(v.tensor(), [pos[2], pos[1], pos[0]], &mut out);
    out
}
