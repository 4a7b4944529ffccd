//! Exemplar loading and multi-scale random patch sampling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageError};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::resample::resize_bilinear;
use crate::tensor::Tensor;

/// Smallest crop edge any scale may use.
pub const MIN_CROP: usize = 4;

/// Which slice orientation(s) an exemplar describes.
///
/// `X` means the exemplar models planes perpendicular to the x axis; `All`
/// marks an isotropic exemplar used for every orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    X,
    Y,
    Z,
    All,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Direction::X),
            "y" => Ok(Direction::Y),
            "z" => Ok(Direction::Z),
            "all" => Ok(Direction::All),
            other => Err(Error::Validation(format!(
                "unknown direction `{other}` (expected x, y, z or all)"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::X => "x",
            Direction::Y => "y",
            Direction::Z => "z",
            Direction::All => "all",
        };
        f.write_str(s)
    }
}

/// A 2D RGB texture with channels in `[0, 1]`, stored as a `(3, 1, H, W)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pixels: Tensor,
    direction: Direction,
}

impl Exemplar {
    pub fn new(pixels: Tensor, direction: Direction) -> Result<Self> {
        let [c, d, h, w] = pixels.shape();
        ensure!(c == 3 && d == 1, "exemplar must be a 3-channel 2D image, got shape {:?}", pixels.shape());
        ensure!(
            h >= MIN_CROP && w >= MIN_CROP,
            "exemplar is {w}x{h}, smaller than the minimum crop of {MIN_CROP}"
        );
        ensure!(
            pixels.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "exemplar channel values must lie in [0, 1]"
        );
        Ok(Exemplar { pixels, direction })
    }

    /// Builds an exemplar from interleaved 8-bit RGB rows.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8], direction: Direction) -> Result<Self> {
        ensure!(
            rgb.len() == width * height * 3,
            "expected {} RGB bytes, got {}",
            width * height * 3,
            rgb.len()
        );
        let pixels = Tensor::from_fn([3, 1, height, width], |c, _, y, x| {
            f64::from(rgb[(y * width + x) * 3 + c]) / 255.0
        });
        Exemplar::new(pixels, direction)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    /// Checks that every crop in `sched` fits inside the image.
    pub fn validate_for(&self, sched: &ScaleSchedule) -> Result<()> {
        let need = sched.crop_size(sched.scales())?;
        ensure!(
            self.height() >= need && self.width() >= need,
            "exemplar is {}x{}, smaller than the largest crop size {need}",
            self.width(),
            self.height()
        );
        Ok(())
    }

    /// Axis-aligned `size`x`size` crop with top-left corner drawn uniformly.
    pub fn random_crop(&self, size: usize, rng: &mut impl Rng) -> Result<Tensor> {
        ensure!(size >= 1, "crop size must be positive");
        ensure!(
            self.height() >= size && self.width() >= size,
            "exemplar is {}x{}, smaller than crop size {size}",
            self.width(),
            self.height()
        );
        let top = rng.random_range(0..=self.height() - size);
        let left = rng.random_range(0..=self.width() - size);
        Ok(self.pixels.window([0, top, left], [1, size, size]))
    }
}

/// Reads a PNG or JPEG file holding an 8-bit RGB image.
pub fn load_exemplar(path: impl AsRef<Path>, direction: Direction) -> Result<Exemplar> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Validation(format!(
                "{}: expected 8-bit RGB, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    Exemplar::from_rgb8(w as usize, h as usize, rgb.as_raw(), direction)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Crop sizes `s_n = round(R * 2^(n - N))` for scales `n = 1..=N`, all
/// resized to the common resolution `R`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    resolution: usize,
    crop_sizes: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(scales: usize, resolution: usize) -> Result<Self> {
        ensure!(scales >= 1, "at least one scale is required");
        let crop_sizes: Vec<usize> = (1..=scales)
            .map(|n| scale_edge(resolution, n, scales))
            .collect();
        ensure!(
            crop_sizes[0] >= MIN_CROP,
            "resolution {resolution} with {scales} scales gives a coarsest crop of {} (< {MIN_CROP})",
            crop_sizes[0]
        );
        ensure!(
            crop_sizes.windows(2).all(|w| w[0] < w[1]),
            "crop sizes {crop_sizes:?} are not strictly increasing"
        );
        Ok(ScaleSchedule {
            resolution,
            crop_sizes,
        })
    }

    pub fn scales(&self) -> usize {
        self.crop_sizes.len()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn crop_sizes(&self) -> &[usize] {
        &self.crop_sizes
    }

    /// Crop edge of 1-based scale `n`.
    pub fn crop_size(&self, n: usize) -> Result<usize> {
        ensure!(
            (1..=self.scales()).contains(&n),
            "scale index {n} outside [1, {}]",
            self.scales()
        );
        Ok(self.crop_sizes[n - 1])
    }
}

/// `round(resolution * 2^(n - scales))`.
pub fn scale_edge(resolution: usize, n: usize, scales: usize) -> usize {
    let e = resolution as f64 * 2f64.powi(n as i32 - scales as i32);
    e.round() as usize
}

/// A real training patch at the common resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Tensor,
    pub scale_index: usize,
}

/// Crops an `s_n` window uniformly at random and resizes it bilinearly to `R`.
pub fn crop_patch(
    ex: &Exemplar,
    n: usize,
    sched: &ScaleSchedule,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let size = sched.crop_size(n)?;
    let crop = ex.random_crop(size, rng)?;
    let r = sched.resolution();
    Ok(Patch {
        pixels: resize_bilinear(&crop, r, r),
        scale_index: n,
    })
}

pub fn sample_real_batch(
    ex: &Exemplar,
    n: usize,
    batch: usize,
    sched: &ScaleSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<Patch>> {
    ensure!(batch >= 1, "batch size must be at least 1");
    (0..batch).map(|_| crop_patch(ex, n, sched, rng)).collect()
}
