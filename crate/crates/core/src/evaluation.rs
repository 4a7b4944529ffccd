//! Desk-scale quality proxies: color histogram distance between slices and
//! exemplars, inter-slice continuity, and the two ablation protocols.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::exemplar::Exemplar;
use crate::frontend::FrontEnd;
use crate::generator::{make_noise_pyramid, Generator};
use crate::slicer::slice_at;
use crate::tensor::Tensor;
use crate::trainer::{DirectionMap, FitOptions, TrainConfig, Trainer};
use crate::volume::{Axis, Volume};

pub const DEFAULT_BINS: usize = 16;

fn histograms(images: &[&Tensor], bins: usize) -> Result<[Vec<f64>; 3]> {
    ensure!(!images.is_empty(), "image set is empty");
    let mut h: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; bins]);
    let mut count = 0usize;
    for img in images {
        ensure!(img.channels() == 3, "histogram input must have 3 channels");
        ensure!(!img.is_empty(), "histogram input is empty");
        count += img.plane_len() * img.depth();
        for (c, hist) in h.iter_mut().enumerate() {
            for &v in img.channel(c) {
                let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
                hist[b] += 1.0;
            }
        }
    }
    for hist in &mut h {
        for v in hist.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(h)
}

/// Mean over RGB channels of the L1 distance between normalized `bins`-bin
/// histograms of two pixel multisets. Lies in `[0, 2]`.
pub fn histogram_distance(a: &[&Tensor], b: &[&Tensor], bins: usize) -> Result<f64> {
    ensure!(bins >= 2, "at least two bins are required, got {bins}");
    let ha = histograms(a, bins)?;
    let hb = histograms(b, bins)?;
    let total: f64 = ha
        .iter()
        .zip(&hb)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum();
    Ok(total / 3.0)
}

pub fn color_histogram_distance(slices: &[Tensor], ex: &Exemplar, bins: usize) -> Result<f64> {
    let a: Vec<&Tensor> = slices.iter().collect();
    histogram_distance(&a, &[ex.pixels()], bins)
}

/// Mean absolute difference between consecutive slices along `axis`.
pub fn continuity(v: &Volume, axis: Axis) -> Result<f64> {
    let s = v.edge();
    ensure!(s >= 2, "continuity needs an edge of at least 2, got {s}");
    let mut total = 0.0;
    for i in 0..s - 1 {
        let a = slice_at(v, axis, i)?.pixels;
        let b = slice_at(v, axis, i + 1)?.pixels;
        total += a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    Ok(total / ((s - 1) * s * s * 3) as f64)
}

/// How a report was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub scales: usize,
    pub resolution: usize,
    pub levels: usize,
    pub iterations: u64,
    pub seed: u64,
    pub front_end: bool,
    pub slicing: String,
    /// SHA-256 of the full training configuration as JSON.
    pub config_sha256: String,
}

impl Fingerprint {
    pub fn of(config: &TrainConfig) -> Self {
        let json = serde_json::to_string(config).expect("config serializes");
        Fingerprint {
            scales: config.scales,
            resolution: config.resolution,
            levels: config.generator.levels,
            iterations: config.iterations,
            seed: config.seed,
            front_end: config.front_end,
            slicing: if config.oblique_slices { "orthogonal+oblique45" } else { "orthogonal" }.into(),
            config_sha256: format!("{:x}", Sha256::digest(json.as_bytes())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub histogram_distance: f64,
    pub continuity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of the per-axis histogram distances.
    pub histogram_distance: f64,
    /// Mean of the per-axis continuities.
    pub continuity: f64,
    pub per_axis: BTreeMap<Axis, AxisReport>,
    pub volume_edge: usize,
    pub slices_per_axis: usize,
    pub bins: usize,
    pub eval_seed: u64,
    /// Training configuration of the evaluated model, when known.
    pub fingerprint: Option<Fingerprint>,
}

impl EvalReport {
    /// Pretty JSON with a fixed key order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::Error::Format(format!("malformed report: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Edge of the evaluated volume; 0 means the training resolution.
    pub volume_edge: usize,
    pub slices_per_axis: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            volume_edge: 0,
            slices_per_axis: 64,
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

/// Synthesizes one volume in evaluation mode and compares slices along every
/// mapped axis with that axis' exemplar.
pub fn evaluate(
    generator: &Generator,
    config: &TrainConfig,
    exemplars: &[Exemplar],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let edge = if options.volume_edge == 0 {
        config.resolution
    } else {
        options.volume_edge
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let gcfg = generator.config();
    let z = make_noise_pyramid(edge, gcfg.levels, gcfg.noise_channels, &mut rng)?;
    let volume = generator.generate(&z)?;
    evaluate_volume(&volume, exemplars, options, Some(Fingerprint::of(config)))
}

/// Compares slices of `volume` along every mapped axis with that axis'
/// exemplar. Slice positions come from stream 1 of `options.seed`.
pub fn evaluate_volume(
    volume: &Volume,
    exemplars: &[Exemplar],
    options: &EvalOptions,
    fingerprint: Option<Fingerprint>,
) -> Result<EvalReport> {
    use rand::Rng;
    ensure!(options.slices_per_axis >= 1, "slices_per_axis must be at least 1");
    let directions = DirectionMap::from_exemplars(exemplars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(1);
    let rng = &mut rng;
    let edge = volume.edge();
    let mut per_axis = BTreeMap::new();
    for axis in directions.axes() {
        let ex = &exemplars[directions.exemplar_for(axis).expect("mapped axis")];
        let slices = (0..options.slices_per_axis)
            .map(|_| Ok(slice_at(volume, axis, rng.random_range(0..edge))?.pixels))
            .collect::<Result<Vec<_>>>()?;
        per_axis.insert(
            axis,
            AxisReport {
                histogram_distance: color_histogram_distance(&slices, ex, options.bins)?,
                continuity: continuity(volume, axis)?,
            },
        );
    }
    let k = per_axis.len() as f64;
    Ok(EvalReport {
        histogram_distance: per_axis.values().map(|a| a.histogram_distance).sum::<f64>() / k,
        continuity: per_axis.values().map(|a| a.continuity).sum::<f64>() / k,
        per_axis,
        volume_edge: edge,
        slices_per_axis: options.slices_per_axis,
        bins: options.bins,
        eval_seed: options.seed,
        fingerprint,
    })
}

/// Trains a fresh model with `config` and evaluates it.
pub fn train_and_evaluate(
    config: &TrainConfig,
    exemplars: &[Exemplar],
    front_end: Option<Arc<FrontEnd>>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let mut trainer = Trainer::new(config.clone(), exemplars.to_vec(), front_end)?;
    trainer.fit(&FitOptions::default())?;
    evaluate(&trainer.state().generator, config, exemplars, options)
}

/// One model per scale count, otherwise identical configuration and seed.
pub fn ablate_scales(
    config: &TrainConfig,
    exemplars: &[Exemplar],
    front_end: Option<Arc<FrontEnd>>,
    scale_counts: &[usize],
    options: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    ensure!(!scale_counts.is_empty(), "no scale counts given");
    ensure!(scale_counts.iter().all(|&n| n >= 1), "scale counts must be at least 1");
    scale_counts
        .iter()
        .map(|&n| {
            let cfg = TrainConfig {
                scales: n,
                ..config.clone()
            };
            train_and_evaluate(&cfg, exemplars, front_end.clone(), options)
        })
        .collect()
}

/// Orthogonal-only against orthogonal plus 45-degree fake slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicingAblation {
    pub orthogonal: EvalReport,
    pub oblique: EvalReport,
    /// `oblique - orthogonal` histogram distance.
    pub histogram_gap: f64,
    /// `oblique - orthogonal` continuity.
    pub continuity_gap: f64,
}

pub fn ablate_slicing(
    config: &TrainConfig,
    exemplars: &[Exemplar],
    front_end: Option<Arc<FrontEnd>>,
    options: &EvalOptions,
) -> Result<SlicingAblation> {
    let run = |oblique: bool| {
        let cfg = TrainConfig {
            oblique_slices: oblique,
            ..config.clone()
        };
        train_and_evaluate(&cfg, exemplars, front_end.clone(), options)
    };
    let orthogonal = run(false)?;
    let oblique = run(true)?;
    Ok(SlicingAblation {
        histogram_gap: oblique.histogram_distance - orthogonal.histogram_distance,
        continuity_gap: oblique.continuity - orthogonal.continuity,
        orthogonal,
        oblique,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_support_is_maximal() {
        let black = Tensor::zeros([3, 1, 4, 4]);
        let white = Tensor::full([3, 1, 4, 4], 1.0);
        assert_eq!(histogram_distance(&[&black], &[&white], 16).unwrap(), 2.0);
        assert_eq!(histogram_distance(&[&black], &[&black], 16).unwrap(), 0.0);
        assert!(histogram_distance(&[], &[&black], 16).is_err());
        assert!(histogram_distance(&[&black], &[&black], 1).is_err());
    }

    #[test]
    fn ramp_continuity_is_inverse_edge() {
        let v = Volume::from_fn(8, |_, z, _, _| z as f64 / 8.0).unwrap();
        assert!((continuity(&v, Axis::Z).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(continuity(&v, Axis::X).unwrap(), 0.0);
        assert!(continuity(&Volume::constant(1, [0.0; 3]).unwrap(), Axis::Z).is_err());
    }
}
