//! Volume persistence, PNG slice stacks and continuous color lookup.
//!
//! Layout of a volume file, all integers little-endian:
//!
//! | offset | size      | content                                   |
//! |--------|-----------|-------------------------------------------|
//! | 0      | 4         | magic `STSV`                              |
//! | 4      | 2         | version (`u16`, currently 1)              |
//! | 6      | 12        | dimensions X, Y, Z (`u32` each)           |
//! | 18     | X·Y·Z·3   | RGB8 voxels, X fastest, then Y, then Z    |

use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::slicer::{scatter_orthogonal, slice_at};
use crate::tensor::Tensor;
use crate::volume::{quantize, Axis, Volume};

pub const MAGIC: [u8; 4] = *b"STSV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let s = v.edge();
    let mut out = Vec::with_capacity(HEADER_LEN + s * s * s * 3);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for _ in 0..3 {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    out.push(quantize(v.get(c, x, y, z)));
                }
            }
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "volume file is {} bytes, shorter than its {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("volume file does not start with `STSV`".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported volume file version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (x, y, z) = (dim(0), dim(1), dim(2));
    if x != y || y != z || x == 0 {
        return Err(Error::Format(format!("volume dimensions {x}x{y}x{z} are not a nonempty cube")));
    }
    let expected = x
        .checked_mul(y)
        .and_then(|n| n.checked_mul(z))
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Format("volume dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "volume payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let s = x;
    let t = Tensor::from_fn([3, s, s, s], |c, zi, yi, xi| {
        f64::from(payload[((zi * s + yi) * s + xi) * 3 + c]) / 255.0
    });
    Volume::new(t)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// An RGB image tensor `(3, 1, H, W)` as 8-bit pixels.
pub fn to_rgb_image(img: &Tensor) -> RgbImage {
    let [c, d, h, w] = img.shape();
    assert!(c == 3 && d == 1, "expected a (3, 1, H, W) image");
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|ci| quantize(img.at(ci, 0, y as usize, x as usize))))
    })
}

pub fn save_png(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_rgb_image(img)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// File name of slice `index` in a stack of `count` slices.
pub fn slice_file_name(index: usize, count: usize) -> String {
    let digits = count.saturating_sub(1).to_string().len().max(3);
    format!("slice_{index:0digits$}.png")
}

/// Writes every slice along `axis` as a PNG into `dir` (created if needed).
/// Returns the number of files.
pub fn export_slice_stack(v: &Volume, axis: Axis, dir: impl AsRef<Path>) -> Result<usize> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = v.edge();
    for i in 0..s {
        save_png(&slice_at(v, axis, i)?.pixels, dir.join(slice_file_name(i, s)))?;
    }
    Ok(s)
}

/// Rebuilds a volume from a stack written by [`export_slice_stack`].
pub fn import_slice_stack(dir: impl AsRef<Path>, axis: Axis) -> Result<Volume> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("slice_") && n.ends_with(".png"))
        })
        .collect();
    files.sort();
    let s = files.len();
    ensure!(s >= 1, "{} contains no slice_*.png files", dir.display());
    let mut t = Tensor::zeros([3, s, s, s]);
    for (i, path) in files.iter().enumerate() {
        ensure!(
            path.file_name().and_then(|n| n.to_str()) == Some(slice_file_name(i, s).as_str()),
            "slice stack in {} is not numbered contiguously",
            dir.display()
        );
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
        ensure!(
            img.width() as usize == s && img.height() as usize == s,
            "{} is {}x{}, expected {s}x{s}",
            path.display(),
            img.width(),
            img.height()
        );
        let slice = Tensor::from_fn([3, 1, s, s], |c, _, y, x| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        });
        scatter_orthogonal(&slice, axis, i, &mut t);
    }
    Volume::new(t)
}

/// Trilinear color at normalized coordinates `uvw` in `[0, 1]^3`, where
/// `u = (i + 0.5) / S` hits the center of voxel `i`; clamped at the borders.
pub fn sample_volume(v: &Volume, uvw: [f64; 3]) -> Result<[f64; 3]> {
    ensure!(
        uvw.iter().all(|c| (0.0..=1.0).contains(c)),
        "sample coordinates {uvw:?} must lie in [0, 1]"
    );
    let s = v.edge() as f64;
    let pos = uvw.map(|u| u * s - 0.5);
    Ok(crate::slicer::sample_point(v, pos))
}
