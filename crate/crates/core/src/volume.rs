use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// A volume axis. Tensors store volumes as `(channel, z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::Validation(format!("unknown axis `{other}` (expected x, y or z)"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// A cubic RGB voxel grid with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    voxels: Tensor,
}

impl Volume {
    pub fn new(voxels: Tensor) -> Result<Self> {
        let [c, d, h, w] = voxels.shape();
        ensure!(c == 3, "volume must have 3 channels, got {c}");
        ensure!(d == h && h == w && d >= 1, "volume must be cubic, got {d}x{h}x{w}");
        ensure!(
            voxels.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "volume values must lie in [0, 1]"
        );
        Ok(Volume { voxels })
    }

    /// Builds a volume from `f(channel, z, y, x)`.
    pub fn from_fn(edge: usize, f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        Volume::new(Tensor::from_fn([3, edge, edge, edge], f))
    }

    pub fn constant(edge: usize, rgb: [f64; 3]) -> Result<Self> {
        Volume::from_fn(edge, |c, _, _, _| rgb[c])
    }

    pub fn edge(&self) -> usize {
        self.voxels.depth()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.voxels
    }

    pub fn into_tensor(self) -> Tensor {
        self.voxels
    }

    /// Value of channel `c` at voxel `(x, y, z)`.
    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.voxels.at(c, z, y, x)
    }

    /// Relabels axes so that the old `axis` becomes the new z axis.
    ///
    /// For `X` the new coordinates are `(x', y', z') = (y, z, x)`; for `Y`
    /// they are `(x, z, y)`; `Z` is the identity. Slicing the result along
    /// z at `i` equals slicing the original along `axis` at `i`.
    pub fn transpose_to_z(&self, axis: Axis) -> Volume {
        let s = self.edge();
        let t = Tensor::from_fn([3, s, s, s], |c, z, y, x| match axis {
            Axis::X => self.get(c, z, x, y),
            Axis::Y => self.get(c, x, z, y),
            Axis::Z => self.get(c, x, y, z),
        });
        Volume { voxels: t }
    }

    /// Rounds every channel to the nearest multiple of 1/255 (half away from zero).
    pub fn quantized(&self) -> Volume {
        Volume {
            voxels: self.voxels.map(|v| f64::from(quantize(v)) / 255.0),
        }
    }
}

/// `round(value * 255)` with ties away from zero, saturating to `0..=255`.
pub fn quantize(value: f64) -> u8 {
    (value * 255.0).round().clamp(0.0, 255.0) as u8
}
