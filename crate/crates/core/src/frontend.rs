//! Frozen feature front-end: the first three convolutional blocks of a
//! VGG-19 image classifier.
//!
//! Weights are read from a safetensors file using torchvision's key names
//! (`features.{0,2,5,7,10,12,14,16}.{weight,bias}`, shapes `[out, in, 3, 3]`,
//! `F32` or `F64`). Inputs in `[0, 1]` are normalized with the ImageNet
//! channel statistics before the first convolution.

use std::path::Path;

use rand::Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::resample::{max_pool2, max_pool2_backward, max_pool2_select};
use crate::nn::Conv;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Output channels of each convolution, grouped by block; every block ends
/// with 2x2 max pooling.
pub const BLOCKS: [&[usize]; 3] = [&[64, 64], &[128, 128], &[256, 256, 256, 256]];

/// torchvision `features.*` indices of the convolutions above.
pub const FEATURE_INDICES: [usize; 8] = [0, 2, 5, 7, 10, 12, 14, 16];

pub const OUT_CHANNELS: usize = 256;
/// Spatial downsampling of the output relative to the input.
pub const DOWNSAMPLING: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FrontEnd {
    convs: Vec<Conv>,
}

/// Saved state of one forward pass, used for input gradients and
/// Jacobian-vector products.
#[derive(Debug)]
pub struct FrontEndTrace {
    input_shape: [usize; 4],
    /// Pre-activation of every convolution.
    pre: Vec<Tensor>,
    /// `(input shape, argmax)` of every pooling step.
    pools: Vec<([usize; 4], Vec<usize>)>,
}

impl FrontEnd {
    fn from_convs(convs: Vec<Conv>) -> Result<Self> {
        let mut expected_in = 3;
        let mut i = 0;
        for block in BLOCKS {
            for &out in block {
                let c = convs
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("front-end is missing convolution {i}")))?;
                if c.in_channels != expected_in || c.out_channels != out || c.kernel != [1, 3, 3] {
                    return Err(Error::Config(format!(
                        "front-end convolution {i} has shape {}->{} {:?}, expected {expected_in}->{out} 3x3",
                        c.in_channels, c.out_channels, c.kernel
                    )));
                }
                expected_in = out;
                i += 1;
            }
        }
        Ok(FrontEnd { convs })
    }

    /// Randomly initialized weights with the VGG-19 layout (for tests and
    /// asset generation).
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for block in BLOCKS {
            for &out in block {
                convs.push(Conv::new(cin, out, [1, 3, 3], true, rng));
                cin = out;
            }
        }
        FrontEnd { convs }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Config(format!("cannot read front-end weights {}: {e}", path.display()))
        })?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| {
            Error::Config(format!("corrupt front-end weights {}: {e}", path.display()))
        })?;
        let mut convs = Vec::new();
        let mut cin = 3;
        let mut i = 0;
        for block in BLOCKS {
            for &out in block {
                let idx = FEATURE_INDICES[i];
                let weight = read_f64(&st, &format!("features.{idx}.weight"), &[out, cin, 3, 3])?;
                let bias = read_f64(&st, &format!("features.{idx}.bias"), &[out])?;
                convs.push(Conv {
                    in_channels: cin,
                    out_channels: out,
                    kernel: [1, 3, 3],
                    weight,
                    bias,
                });
                cin = out;
                i += 1;
            }
        }
        FrontEnd::from_convs(convs)
    }

    /// Writes the weights in the format accepted by [`FrontEnd::load`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let idx = FEATURE_INDICES[i];
            owned.push((
                format!("features.{idx}.weight"),
                vec![c.out_channels, c.in_channels, 3, 3],
                f64_bytes(&c.weight),
            ));
            owned.push((format!("features.{idx}.bias"), vec![c.out_channels], f64_bytes(&c.bias)));
        }
        let views: Vec<(String, TensorView<'_>)> = owned
            .iter()
            .map(|(name, shape, data)| {
                let view = TensorView::new(Dtype::F64, shape.clone(), data)
                    .map_err(|e| Error::Format(e.to_string()))?;
                Ok((name.clone(), view))
            })
            .collect::<Result<_>>()?;
        let bytes = safetensors::serialize(views, &None).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 over every weight and bias, in layer order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.convs {
            for v in c.weight.iter().chain(&c.bias) {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    fn normalize(x: &Tensor) -> Tensor {
        Tensor::from_fn(x.shape(), |c, z, y, xx| {
            (x.at(c, z, y, xx) - IMAGENET_MEAN[c]) / IMAGENET_STD[c]
        })
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let [c, d, h, w] = x.shape();
        if c != 3 || d != 1 || h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "front-end input must be a 3-channel image with sides divisible by {DOWNSAMPLING}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FrontEndTrace)> {
        Self::check_input(x)?;
        let mut h = Self::normalize(x);
        let mut trace = FrontEndTrace {
            input_shape: x.shape(),
            pre: Vec::with_capacity(self.convs.len()),
            pools: Vec::with_capacity(3),
        };
        let mut i = 0;
        for block in BLOCKS {
            for _ in 0..block.len() {
                let z = self.convs[i].forward(&h);
                h = z.map(|v| v.max(0.0));
                trace.pre.push(z);
                i += 1;
            }
            let shape = h.shape();
            let (pooled, argmax) = max_pool2(&h);
            trace.pools.push((shape, argmax));
            h = pooled;
        }
        Ok((h, trace))
    }

    /// Gradient with respect to the input image; weight gradients are never formed.
    pub fn backward(&self, trace: &FrontEndTrace, dfeat: &Tensor) -> Tensor {
        let mut d = dfeat.clone();
        let mut i = self.convs.len();
        for (b, block) in BLOCKS.iter().enumerate().rev() {
            let (shape, argmax) = &trace.pools[b];
            d = max_pool2_backward(&d, argmax, *shape);
            for _ in 0..block.len() {
                i -= 1;
                for (g, &z) in d.data_mut().iter_mut().zip(trace.pre[i].data()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                d = self.convs[i].backward_input(&d);
            }
        }
        Tensor::from_fn(trace.input_shape, |c, z, y, x| d.at(c, z, y, x) / IMAGENET_STD[c])
    }

    /// Directional derivative of the features along `direction` (input space).
    pub fn jvp(&self, trace: &FrontEndTrace, direction: &Tensor) -> Tensor {
        let mut t = Tensor::from_fn(direction.shape(), |c, z, y, x| {
            direction.at(c, z, y, x) / IMAGENET_STD[c]
        });
        let mut i = 0;
        for (b, block) in BLOCKS.iter().enumerate() {
            for _ in 0..block.len() {
                t = self.convs[i].forward_linear(&t);
                for (v, &z) in t.data_mut().iter_mut().zip(trace.pre[i].data()) {
                    if z <= 0.0 {
                        *v = 0.0;
                    }
                }
                i += 1;
            }
            let (shape, argmax) = &trace.pools[b];
            let out = [shape[0], 1, shape[2] / 2, shape[3] / 2];
            t = max_pool2_select(&t, argmax, out);
        }
        t
    }
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f64(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let view = st
        .tensor(name)
        .map_err(|_| Error::Config(format!("front-end weights lack tensor `{name}`")))?;
    if view.shape() != shape {
        return Err(Error::Config(format!(
            "front-end tensor `{name}` has shape {:?}, expected {shape:?}",
            view.shape()
        )));
    }
    decode(view.dtype(), view.data())
        .ok_or_else(|| Error::Config(format!("front-end tensor `{name}` must be F32 or F64")))
}

/// Little-endian float payload to `f64`.
pub(crate) fn decode(dtype: Dtype, data: &[u8]) -> Option<Vec<f64>> {
    match dtype {
        Dtype::F64 => Some(
            data.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F32 => Some(
            data.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        ),
        _ => None,
    }
}
