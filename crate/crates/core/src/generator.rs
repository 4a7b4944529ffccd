//! The solid texture generator: a fully convolutional 3D cascade that maps a
//! pyramid of volumetric noises to an RGB volume.
//!
//! Level 1 (coarsest) noise is preprocessed by its own convolution block.
//! Each finer level is preprocessed likewise, concatenated on channels with
//! the 2x nearest-neighbor upsampled running feature map, and merged by
//! another block. A final two-layer block maps to three channels, squashed
//! into `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::activation::{
    leaky_relu_backward, leaky_relu_forward, unit_squash, unit_squash_backward,
};
use crate::nn::norm::BatchNormCache;
use crate::nn::resample::{upsample_nearest2, upsample_nearest2_backward};
use crate::nn::{BatchNorm, Conv, Parameters};
use crate::tensor::Tensor;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of noise levels `K`.
    pub levels: usize,
    /// Channels per noise level.
    pub noise_channels: usize,
    /// Hidden channels of every block.
    pub width: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            levels: 3,
            noise_channels: 8,
            width: 32,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels >= 1, "generator needs at least one noise level");
        ensure!(self.noise_channels >= 1, "noise_channels must be positive");
        ensure!(self.width >= 1, "generator width must be positive");
        ensure!(
            self.leaky_slope.is_finite() && self.leaky_slope >= 0.0,
            "leaky_slope must be a finite non-negative number"
        );
        Ok(())
    }

    /// Checks that an output edge `edge` is admissible for the cascade.
    pub fn check_edge(&self, edge: usize) -> Result<()> {
        check_pyramid_edge(edge, self.levels)
    }
}

fn check_pyramid_edge(edge: usize, levels: usize) -> Result<()> {
    ensure!(levels >= 1, "noise pyramid needs at least one level");
    let factor = 1usize << (levels - 1);
    ensure!(
        edge % factor == 0,
        "volume edge {edge} must be divisible by 2^(K-1) = {factor} for K = {levels}"
    );
    ensure!(
        edge >= 2 * factor,
        "volume edge {edge} must be at least 2^K = {} for K = {levels}",
        2 * factor
    );
    Ok(())
}

/// The `K` noise grids, coarsest first; each level doubles the edge.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePyramid {
    pub levels: Vec<Tensor>,
}

impl NoisePyramid {
    pub fn edges(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.depth()).collect()
    }

    pub fn output_edge(&self) -> usize {
        self.levels.last().map_or(0, |l| l.depth())
    }

    /// Spatial window of every level, with the origin given in finest-level
    /// voxels (must be a multiple of `2^(K-1)`).
    pub fn window(&self, origin: [usize; 3], edge: usize) -> Result<NoisePyramid> {
        let k = self.levels.len();
        let factor = 1usize << (k - 1);
        ensure!(
            origin.iter().all(|o| o % factor == 0),
            "window origin must be a multiple of {factor}"
        );
        check_pyramid_edge(edge, k)?;
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let scale = 1usize << (k - 1 - i);
                let e = edge / scale;
                l.window(origin.map(|o| o / scale), [e, e, e])
            })
            .collect();
        Ok(NoisePyramid { levels })
    }
}

/// Standard-normal noise levels of edges `S/2^(K-1), ..., S/2, S`.
pub fn make_noise_pyramid(
    edge: usize,
    levels: usize,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<NoisePyramid> {
    check_pyramid_edge(edge, levels)?;
    ensure!(channels >= 1, "noise needs at least one channel");
    let levels = (0..levels)
        .map(|i| {
            let e = edge >> (levels - 1 - i);
            Tensor::randn([channels, e, e, e], rng)
        })
        .collect();
    Ok(NoisePyramid { levels })
}

/// Extent of one output site's receptive field for a plain stack of
/// same-padded convolutions with the given kernel edges.
pub fn stacked_receptive_field(kernels: &[usize]) -> usize {
    1 + kernels.iter().map(|k| k - 1).sum::<usize>()
}

/// Operations that make up the network, in evaluation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Conv3d { kernel: usize, in_channels: usize, out_channels: usize },
    BatchNorm,
    LeakyRelu,
    UpsampleNearest2,
    ConcatChannels,
    UnitSquash,
}

/// Three convolutions with kernel edges (3, 3, 1); batch normalization and a
/// leaky rectifier follow each of the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: [Conv; 3],
    pub norm: [BatchNorm; 2],
}

#[derive(Debug)]
struct BlockCache {
    input: Tensor,
    norm: [BatchNormCache; 2],
    pre: [Tensor; 2],
    act: [Tensor; 2],
}

impl ConvBlock {
    fn new(in_channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: [
                Conv::new(in_channels, width, [3, 3, 3], false, rng),
                Conv::new(width, width, [3, 3, 3], false, rng),
                Conv::new(width, width, [1, 1, 1], true, rng),
            ],
            norm: [BatchNorm::new(width), BatchNorm::new(width)],
        }
    }

    fn zeros_like(&self) -> Self {
        ConvBlock {
            conv: [
                self.conv[0].zeros_like(),
                self.conv[1].zeros_like(),
                self.conv[2].zeros_like(),
            ],
            norm: [self.norm[0].zeros_like(), self.norm[1].zeros_like()],
        }
    }

    fn forward_eval(&self, x: &Tensor, slope: f64) -> Tensor {
        let mut h = x.clone();
        for i in 0..2 {
            h = leaky_relu_forward(&self.norm[i].forward_eval(&self.conv[i].forward(&h)), slope);
        }
        self.conv[2].forward(&h)
    }

    fn forward_train(&mut self, x: &Tensor, slope: f64) -> (Tensor, BlockCache) {
        let y0 = self.conv[0].forward(x);
        let (a0, c0) = self.norm[0].forward_train(&y0);
        let h0 = leaky_relu_forward(&a0, slope);
        let y1 = self.conv[1].forward(&h0);
        let (a1, c1) = self.norm[1].forward_train(&y1);
        let h1 = leaky_relu_forward(&a1, slope);
        let out = self.conv[2].forward(&h1);
        let cache = BlockCache {
            input: x.clone(),
            norm: [c0, c1],
            pre: [a0, a1],
            act: [h0, h1],
        };
        (out, cache)
    }

    fn backward(
        &self,
        cache: &BlockCache,
        dy: &Tensor,
        grad: &mut ConvBlock,
        slope: f64,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        self.conv[2].accumulate_weight_grad(&cache.act[1], dy, &mut grad.conv[2].weight);
        self.conv[2].accumulate_bias_grad(dy, &mut grad.conv[2].bias);
        let mut d = self.conv[2].backward_input(dy);
        for i in (0..2).rev() {
            d = leaky_relu_backward(&cache.pre[i], &d, slope);
            d = self.norm[i].backward(&cache.norm[i], &d, &mut grad.norm[i]);
            let input = if i == 0 { &cache.input } else { &cache.act[0] };
            self.conv[i].accumulate_weight_grad(input, &d, &mut grad.conv[i].weight);
            if i == 0 && !need_input_grad {
                return None;
            }
            d = self.conv[i].backward_input(&d);
        }
        Some(d)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.weight"), &c.weight));
            if c.has_bias() {
                out.push((format!("{prefix}.conv{i}.bias"), &c.bias));
            }
        }
        for (i, n) in self.norm.iter().enumerate() {
            out.push((format!("{prefix}.norm{i}.gamma"), &n.gamma));
            out.push((format!("{prefix}.norm{i}.beta"), &n.beta));
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for c in &mut self.conv {
            out.push(&mut c.weight);
            if !c.bias.is_empty() {
                out.push(&mut c.bias);
            }
        }
        for n in &mut self.norm {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
    }

    fn ops(&self, out: &mut Vec<Op>) {
        for (i, c) in self.conv.iter().enumerate() {
            out.push(conv_op(c));
            if i < 2 {
                out.push(Op::BatchNorm);
                out.push(Op::LeakyRelu);
            }
        }
    }

    fn growth(&self) -> usize {
        self.conv.iter().map(|c| c.kernel[0] - 1).sum()
    }
}

fn conv_op(c: &Conv) -> Op {
    Op::Conv3d {
        kernel: c.kernel[0],
        in_channels: c.in_channels,
        out_channels: c.out_channels,
    }
}

/// Generator parameters plus batch-normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    /// One preprocessing block per noise level, coarsest first.
    pub pre: Vec<ConvBlock>,
    /// Merge blocks for levels `2..=K`.
    pub merge: Vec<ConvBlock>,
    pub out_conv: [Conv; 2],
    pub out_norm: BatchNorm,
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug)]
pub struct GeneratorCache {
    pre: Vec<BlockCache>,
    merge: Vec<BlockCache>,
    out_input: Tensor,
    out_norm: BatchNormCache,
    out_pre: Tensor,
    out_act: Tensor,
    output: Tensor,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let pre = (0..config.levels)
            .map(|_| ConvBlock::new(config.noise_channels, w, rng))
            .collect();
        let merge = (1..config.levels)
            .map(|_| ConvBlock::new(2 * w, w, rng))
            .collect();
        let out_conv = [
            Conv::new(w, w, [3, 3, 3], false, rng),
            Conv::new(w, 3, [3, 3, 3], true, rng),
        ];
        Ok(Generator {
            config,
            pre,
            merge,
            out_conv,
            out_norm: BatchNorm::new(w),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn check_pyramid(&self, z: &NoisePyramid) -> Result<()> {
        ensure!(
            z.levels.len() == self.config.levels,
            "noise pyramid has {} levels, generator expects {}",
            z.levels.len(),
            self.config.levels
        );
        let edge = z.output_edge();
        self.config.check_edge(edge)?;
        for (i, l) in z.levels.iter().enumerate() {
            let e = edge >> (self.config.levels - 1 - i);
            ensure!(
                l.shape() == [self.config.noise_channels, e, e, e],
                "noise level {} has shape {:?}, expected {:?}",
                i + 1,
                l.shape(),
                [self.config.noise_channels, e, e, e]
            );
        }
        Ok(())
    }

    /// Evaluation-mode synthesis using frozen normalization statistics.
    pub fn generate(&self, z: &NoisePyramid) -> Result<Volume> {
        self.check_pyramid(z)?;
        let slope = self.config.leaky_slope;
        let mut f = self.pre[0].forward_eval(&z.levels[0], slope);
        for k in 1..self.config.levels {
            let p = self.pre[k].forward_eval(&z.levels[k], slope);
            let cat = Tensor::concat_channels(&upsample_nearest2(&f), &p);
            f = self.merge[k - 1].forward_eval(&cat, slope);
        }
        let a = self.out_norm.forward_eval(&self.out_conv[0].forward(&f));
        let h = leaky_relu_forward(&a, slope);
        Volume::new(unit_squash(&self.out_conv[1].forward(&h)))
    }

    /// Training-mode synthesis: batch statistics, running averages updated.
    pub fn forward_train(&mut self, z: &NoisePyramid) -> Result<(Volume, GeneratorCache)> {
        self.check_pyramid(z)?;
        let slope = self.config.leaky_slope;
        let mut pre_caches = Vec::with_capacity(self.config.levels);
        let mut merge_caches = Vec::with_capacity(self.config.levels - 1);
        let (mut f, c) = self.pre[0].forward_train(&z.levels[0], slope);
        pre_caches.push(c);
        for k in 1..self.config.levels {
            let (p, c) = self.pre[k].forward_train(&z.levels[k], slope);
            pre_caches.push(c);
            let cat = Tensor::concat_channels(&upsample_nearest2(&f), &p);
            let (m, c) = self.merge[k - 1].forward_train(&cat, slope);
            merge_caches.push(c);
            f = m;
        }
        let y = self.out_conv[0].forward(&f);
        let (a, out_norm) = self.out_norm.forward_train(&y);
        let h = leaky_relu_forward(&a, slope);
        let output = unit_squash(&self.out_conv[1].forward(&h));
        let volume = Volume::new(output.clone())?;
        let cache = GeneratorCache {
            pre: pre_caches,
            merge: merge_caches,
            out_input: f,
            out_norm,
            out_pre: a,
            out_act: h,
            output,
        };
        Ok((volume, cache))
    }

    /// Gradient of a scalar loss with respect to all trainable parameters,
    /// given `d loss / d volume` as a `(3, S, S, S)` tensor.
    pub fn backward(&self, cache: &GeneratorCache, dvolume: &Tensor) -> Generator {
        assert_eq!(dvolume.shape(), cache.output.shape());
        let slope = self.config.leaky_slope;
        let mut grad = self.zeros_like();
        let d = unit_squash_backward(&cache.output, dvolume);
        self.out_conv[1].accumulate_weight_grad(&cache.out_act, &d, &mut grad.out_conv[1].weight);
        self.out_conv[1].accumulate_bias_grad(&d, &mut grad.out_conv[1].bias);
        let d = self.out_conv[1].backward_input(&d);
        let d = leaky_relu_backward(&cache.out_pre, &d, slope);
        let d = self.out_norm.backward(&cache.out_norm, &d, &mut grad.out_norm);
        self.out_conv[0].accumulate_weight_grad(&cache.out_input, &d, &mut grad.out_conv[0].weight);
        let mut df = self.out_conv[0].backward_input(&d);
        let w = self.config.width;
        for k in (1..self.config.levels).rev() {
            let dcat = self.merge[k - 1]
                .backward(&cache.merge[k - 1], &df, &mut grad.merge[k - 1], slope, true)
                .expect("merge block input gradient");
            let (dup, dpre) = dcat.split_channels(w);
            self.pre[k].backward(&cache.pre[k], &dpre, &mut grad.pre[k], slope, false);
            df = upsample_nearest2_backward(&dup);
        }
        self.pre[0].backward(&cache.pre[0], &df, &mut grad.pre[0], slope, false);
        grad
    }

    /// Extent along one axis of the output region influenced by a single
    /// interior noise voxel, maximized over pyramid levels. Measured in
    /// output voxels.
    pub fn receptive_field(&self) -> usize {
        (0..self.config.levels)
            .map(|level| self.level_receptive_field(level))
            .max()
            .unwrap_or(1)
    }

    /// Same as [`Generator::receptive_field`] for the 0-based `level` only.
    pub fn level_receptive_field(&self, level: usize) -> usize {
        let mut extent = 1 + self.pre[level].growth();
        if level >= 1 {
            extent += self.merge[level - 1].growth();
        }
        for k in level + 1..self.config.levels {
            // nearest x2 maps [a, b] to [2a, 2b + 1]
            extent = 2 * extent + self.merge[k - 1].growth();
        }
        extent + self.out_conv.iter().map(|c| c.kernel[0] - 1).sum::<usize>()
    }

    /// Every operation of the network in evaluation order.
    pub fn ops(&self) -> Vec<Op> {
        let mut ops = Vec::new();
        self.pre[0].ops(&mut ops);
        for k in 1..self.config.levels {
            ops.push(Op::UpsampleNearest2);
            self.pre[k].ops(&mut ops);
            ops.push(Op::ConcatChannels);
            self.merge[k - 1].ops(&mut ops);
        }
        ops.push(conv_op(&self.out_conv[0]));
        ops.push(Op::BatchNorm);
        ops.push(Op::LeakyRelu);
        ops.push(conv_op(&self.out_conv[1]));
        ops.push(Op::UnitSquash);
        ops
    }

    /// Non-trainable state: normalization running statistics.
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut norms: Vec<(String, &BatchNorm)> = Vec::new();
        for (i, b) in self.pre.iter().enumerate() {
            for (j, n) in b.norm.iter().enumerate() {
                norms.push((format!("pre{i}.norm{j}"), n));
            }
        }
        for (i, b) in self.merge.iter().enumerate() {
            for (j, n) in b.norm.iter().enumerate() {
                norms.push((format!("merge{i}.norm{j}"), n));
            }
        }
        norms.push(("out.norm".to_string(), &self.out_norm));
        norms
            .into_iter()
            .flat_map(|(name, n)| {
                [
                    (format!("{name}.running_mean"), n.running_mean.as_slice()),
                    (format!("{name}.running_var"), n.running_var.as_slice()),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let norms = self
            .pre
            .iter_mut()
            .chain(self.merge.iter_mut())
            .flat_map(|b| b.norm.iter_mut())
            .chain(std::iter::once(&mut self.out_norm));
        for n in norms {
            out.push(&mut n.running_mean);
            out.push(&mut n.running_var);
        }
        out
    }
}

impl Parameters for Generator {
    fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, b) in self.pre.iter().enumerate() {
            b.visit(&format!("pre{i}"), &mut out);
        }
        for (i, b) in self.merge.iter().enumerate() {
            b.visit(&format!("merge{i}"), &mut out);
        }
        out.push(("out.conv0.weight".into(), &self.out_conv[0].weight));
        out.push(("out.conv1.weight".into(), &self.out_conv[1].weight));
        out.push(("out.conv1.bias".into(), &self.out_conv[1].bias));
        out.push(("out.norm.gamma".into(), &self.out_norm.gamma));
        out.push(("out.norm.beta".into(), &self.out_norm.beta));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.pre {
            b.visit_mut(&mut out);
        }
        for b in &mut self.merge {
            b.visit_mut(&mut out);
        }
        let [c0, c1] = &mut self.out_conv;
        out.push(&mut c0.weight);
        out.push(&mut c1.weight);
        out.push(&mut c1.bias);
        out.push(&mut self.out_norm.gamma);
        out.push(&mut self.out_norm.beta);
        out
    }

    fn zeros_like(&self) -> Self {
        Generator {
            config: self.config,
            pre: self.pre.iter().map(ConvBlock::zeros_like).collect(),
            merge: self.merge.iter().map(ConvBlock::zeros_like).collect(),
            out_conv: [self.out_conv[0].zeros_like(), self.out_conv[1].zeros_like()],
            out_norm: self.out_norm.zeros_like(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small(levels: usize) -> (GeneratorConfig, ChaCha8Rng) {
        let cfg = GeneratorConfig {
            levels,
            noise_channels: 2,
            width: 3,
            leaky_slope: 0.2,
        };
        (cfg, ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn pyramid_edges_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = make_noise_pyramid(32, 3, 8, &mut rng).unwrap();
        assert_eq!(z.edges(), vec![8, 16, 32]);
        assert_eq!(z.levels[0].shape(), [8, 8, 8, 8]);
        let z = make_noise_pyramid(8, 1, 2, &mut rng).unwrap();
        assert_eq!(z.edges(), vec![8]);
        assert!(make_noise_pyramid(66, 3, 8, &mut rng).is_err());
        assert!(make_noise_pyramid(4, 3, 8, &mut rng).is_err());
        assert!(make_noise_pyramid(8, 3, 8, &mut rng).is_ok());
    }

    #[test]
    fn pyramid_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = make_noise_pyramid(32, 1, 8, &mut rng).unwrap();
        let n = z.levels[0].len() as f64;
        let mean = z.levels[0].mean();
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        let var = z.levels[0].data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn stacked_fields() {
        assert_eq!(stacked_receptive_field(&[3]), 3);
        assert_eq!(stacked_receptive_field(&[3, 3]), 5);
        assert_eq!(stacked_receptive_field(&[3, 3, 1]), 5);
    }

    #[test]
    fn default_architecture_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(GeneratorConfig { width: 2, ..Default::default() }, &mut rng).unwrap();
        assert_eq!(g.level_receptive_field(2), 13);
        assert_eq!(g.level_receptive_field(1), 26);
        assert_eq!(g.receptive_field(), 36);
    }

    #[test]
    fn rejects_mismatched_pyramid() {
        let (cfg, mut rng) = small(2);
        let g = Generator::new(cfg, &mut rng).unwrap();
        let z = make_noise_pyramid(8, 3, 2, &mut rng).unwrap();
        assert!(g.generate(&z).is_err());
        let z = make_noise_pyramid(8, 2, 5, &mut rng).unwrap();
        assert!(g.generate(&z).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (cfg, mut rng) = small(2);
        let g = Generator::new(cfg, &mut rng).unwrap();
        let z = make_noise_pyramid(4, 2, 2, &mut rng).unwrap();
        let probe = Tensor::randn([3, 4, 4, 4], &mut rng);
        let loss = |g: &Generator| {
            let mut g = g.clone();
            let (v, _) = g.forward_train(&z).unwrap();
            v.tensor().dot(&probe)
        };
        let mut gm = g.clone();
        let (_, cache) = gm.forward_train(&z).unwrap();
        let grad = g.backward(&cache, &probe);
        let h = 1e-6;
        let names: Vec<String> = g.params().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grad.params().into_iter().map(|(_, p)| p.to_vec()).collect();
        for (pi, name) in names.iter().enumerate() {
            let len = analytic[pi].len();
            for &i in &[0, len / 2, len - 1] {
                let mut plus = g.clone();
                plus.params_mut()[pi][i] += h;
                let mut minus = g.clone();
                minus.params_mut()[pi][i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[pi][i];
                assert!(
                    (fd - a).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{name}[{i}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}
