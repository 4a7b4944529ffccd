//! Alternating adversarial training of the generator against the per-scale
//! slice critics.

pub mod loss;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::critic::{Critic, CriticConfig, Discriminators};
use crate::error::{ensure, Error, Result};
use crate::exemplar::{crop_patch, Direction, Exemplar, ScaleSchedule};
use crate::frontend::{FrontEnd, DOWNSAMPLING};
use crate::generator::{make_noise_pyramid, Generator, GeneratorConfig, NoisePyramid};
use crate::nn::resample::{resize_bilinear, resize_bilinear_backward};
use crate::nn::{Adam, AdamState, Parameters};
use crate::slicer::{extract, sample_plane, scatter, SlicePlane};
use crate::tensor::Tensor;
use crate::volume::{Axis, Volume};

pub use loss::{
    critic_objective, discriminator_loss, generator_loss, generator_objective, gradient_penalty, CriticLosses,
    GpSample,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of discriminant scales `N`.
    pub scales: usize,
    /// Common critic resolution `R`; scale `n` uses volumes of edge `R * 2^(n - N)`.
    pub resolution: usize,
    pub gp_weight: f64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub adam_betas: [f64; 2],
    /// Volumes per generator update. Only 1 is supported.
    pub generator_batch: usize,
    /// Fake slices (and real patches) per critic update.
    pub critic_batch: usize,
    pub iterations: u64,
    pub seed: u64,
    pub front_end: bool,
    /// Adds 45-degree slices to the fake batches.
    pub oblique_slices: bool,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scales: 5,
            resolution: 128,
            gp_weight: 10.0,
            lr_generator: 5e-4,
            lr_critic: 3e-4,
            adam_betas: [0.5, 0.9],
            generator_batch: 1,
            critic_batch: 72,
            iterations: 30_000,
            seed: 0,
            front_end: true,
            oblique_slices: false,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::new(self.scales, self.resolution)
    }

    /// Volume edge of 1-based scale `n`.
    pub fn scale_edge(&self, n: usize) -> Result<usize> {
        self.schedule()?.crop_size(n)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        ensure!(positive(self.lr_generator), "lr_generator must be positive");
        ensure!(positive(self.lr_critic), "lr_critic must be positive");
        ensure!(
            self.gp_weight.is_finite() && self.gp_weight >= 0.0,
            "gp_weight must be non-negative"
        );
        ensure!(
            self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)),
            "adam_betas must lie in [0, 1)"
        );
        ensure!(self.generator_batch == 1, "generator_batch must be 1");
        ensure!(self.critic_batch >= 1, "critic_batch must be at least 1");
        self.generator.validate()?;
        self.critic.validate()?;
        let sched = self.schedule()?;
        for (i, &edge) in sched.crop_sizes().iter().enumerate() {
            self.generator.check_edge(edge).map_err(|e| {
                Error::Validation(format!("scale {} (edge {edge}) is not a valid volume size: {e}", i + 1))
            })?;
        }
        if self.front_end {
            ensure!(
                self.resolution % DOWNSAMPLING == 0,
                "resolution {} must be divisible by {DOWNSAMPLING} when the front-end is enabled",
                self.resolution
            );
        }
        Ok(())
    }
}

/// Which exemplar supplies real patches for slices orthogonal to each axis.
///
/// An exemplar labelled `All` covers every axis not claimed by a
/// direction-specific exemplar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionMap {
    map: BTreeMap<Axis, usize>,
}

impl DirectionMap {
    pub fn from_exemplars(exemplars: &[Exemplar]) -> Result<Self> {
        ensure!(!exemplars.is_empty(), "at least one exemplar is required");
        let mut map = BTreeMap::new();
        let mut all = None;
        for (i, ex) in exemplars.iter().enumerate() {
            let axis = match ex.direction() {
                Direction::All => {
                    ensure!(all.is_none(), "more than one exemplar has direction `all`");
                    all = Some(i);
                    continue;
                }
                Direction::X => Axis::X,
                Direction::Y => Axis::Y,
                Direction::Z => Axis::Z,
            };
            ensure!(
                map.insert(axis, i).is_none(),
                "more than one exemplar has direction `{axis}`"
            );
        }
        if let Some(i) = all {
            for axis in Axis::ALL {
                map.entry(axis).or_insert(i);
            }
        }
        ensure!(
            map.len() >= 2,
            "direction-specific exemplars must cover at least two axes, got {}",
            map.len()
        );
        Ok(DirectionMap { map })
    }

    pub fn axes(&self) -> Vec<Axis> {
        self.map.keys().copied().collect()
    }

    pub fn exemplar_for(&self, axis: Axis) -> Option<usize> {
        self.map.get(&axis).copied()
    }

    /// Oblique planes use the exemplar of their rotation axis, or of the
    /// first mapped axis when that one is unmapped.
    pub fn exemplar_for_plane(&self, plane: SlicePlane) -> usize {
        let axis = match plane {
            SlicePlane::Orthogonal { axis, .. } => axis,
            SlicePlane::Oblique45 { rotation_axis, .. } => rotation_axis,
        };
        self.exemplar_for(axis)
            .unwrap_or_else(|| *self.map.values().next().expect("nonempty map"))
    }

    pub fn is_isotropic(&self) -> bool {
        self.map.len() == 3 && self.map.values().all(|&i| i == self.map[&Axis::X])
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub generator: Generator,
    pub critics: Discriminators,
    pub generator_opt: AdamState<Generator>,
    pub critic_opts: Vec<AdamState<Critic>>,
    /// Completed iterations.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl ModelState {
    /// Fresh state; parameters are drawn from the seeded stream, which then
    /// continues as the training stream.
    pub fn init(config: &TrainConfig, front_end: Option<Arc<FrontEnd>>) -> Result<Self> {
        config.validate()?;
        check_front_end(config, front_end.as_deref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(config.generator.clone(), &mut rng)?;
        let critics = Discriminators::new(config.scales, config.resolution, &config.critic, front_end, &mut rng)?;
        Ok(ModelState {
            generator_opt: AdamState::new(&generator),
            critic_opts: critics.critics.iter().map(AdamState::new).collect(),
            generator,
            critics,
            iteration: 0,
            rng,
        })
    }

    /// Synthesizes a volume of edge `edge` in evaluation mode.
    pub fn synthesize(&self, edge: usize, rng: &mut impl Rng) -> Result<Volume> {
        let cfg = self.generator.config();
        let z = make_noise_pyramid(edge, cfg.levels, cfg.noise_channels, rng)?;
        self.generator.generate(&z)
    }
}

fn check_front_end(config: &TrainConfig, front_end: Option<&FrontEnd>) -> Result<()> {
    match (config.front_end, front_end.is_some()) {
        (true, false) => Err(Error::Config(
            "the front-end is enabled but no weights were provided".into(),
        )),
        (false, true) => Err(Error::Config(
            "front-end weights were provided but the front-end is disabled".into(),
        )),
        _ => Ok(()),
    }
}

/// Losses of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based number of the completed iteration.
    pub iteration: u64,
    /// Critic losses in scale order.
    pub critic: Vec<CriticLosses>,
    pub generator_loss: f64,
    /// The scale `n*` of the generator update.
    pub chosen_scale: usize,
    /// Seconds spent in the iteration; the only nondeterministic field.
    pub wall_time_s: f64,
}

/// The per-iteration update schedule, abstracted over the models so it can
/// be exercised with stubs.
pub trait AdversarialModels {
    fn scales(&self) -> usize;
    fn schedule_rng(&mut self) -> &mut ChaCha8Rng;
    fn update_critic(&mut self, n: usize) -> Result<CriticLosses>;
    fn update_generator(&mut self, n: usize) -> Result<f64>;
}

/// Updates every critic once in scale order, then the generator once
/// against a uniformly drawn scale. Returns the critic losses, the drawn
/// scale and the generator loss.
pub fn run_schedule<M: AdversarialModels>(models: &mut M) -> Result<(Vec<CriticLosses>, usize, f64)> {
    let scales = models.scales();
    let critic = (1..=scales)
        .map(|n| models.update_critic(n))
        .collect::<Result<Vec<_>>>()?;
    let chosen = models.schedule_rng().random_range(1..=scales);
    let g = models.update_generator(chosen)?;
    Ok((critic, chosen, g))
}

/// Where [`Trainer::fit`] writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for `checkpoint-XXXXXXXX.safetensors` files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Append-only JSON-lines log of [`StepMetrics`].
    pub metrics_log: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:08}.safetensors"))
}

#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    exemplars: Vec<Exemplar>,
    directions: DirectionMap,
    schedule: ScaleSchedule,
    state: ModelState,
}

impl Trainer {
    pub fn new(config: TrainConfig, exemplars: Vec<Exemplar>, front_end: Option<Arc<FrontEnd>>) -> Result<Self> {
        let state = ModelState::init(&config, front_end)?;
        Trainer::with_state(config, exemplars, state)
    }

    /// Continues from a saved state.
    pub fn resume(
        path: impl AsRef<Path>,
        config: TrainConfig,
        exemplars: Vec<Exemplar>,
        front_end: Option<Arc<FrontEnd>>,
    ) -> Result<Self> {
        let state = checkpoint::load_state(path, &config, front_end)?;
        Trainer::with_state(config, exemplars, state)
    }

    fn with_state(config: TrainConfig, exemplars: Vec<Exemplar>, state: ModelState) -> Result<Self> {
        config.validate()?;
        let directions = DirectionMap::from_exemplars(&exemplars)?;
        let schedule = config.schedule()?;
        for ex in &exemplars {
            ex.validate_for(&schedule)?;
        }
        Ok(Trainer {
            config,
            exemplars,
            directions,
            schedule,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn directions(&self) -> &DirectionMap {
        &self.directions
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    fn sample_planes(&mut self, edge: usize) -> Result<Vec<SlicePlane>> {
        let axes = self.directions.axes();
        (0..self.config.critic_batch)
            .map(|_| sample_plane(edge, &axes, self.config.oblique_slices, &mut self.state.rng))
            .collect()
    }

    fn numerical(&self, detail: String) -> Error {
        Error::Numerical {
            iteration: self.state.iteration + 1,
            detail,
        }
    }

    /// One iteration: every critic once, then the generator once.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let (critic, chosen_scale, generator_loss) = run_schedule(self)?;
        self.state.iteration += 1;
        Ok(StepMetrics {
            iteration: self.state.iteration,
            critic,
            generator_loss,
            chosen_scale,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs until `config.iterations` iterations are complete, logging and
    /// checkpointing as requested. Returns the metrics of this call.
    pub fn fit(&mut self, options: &FitOptions) -> Result<Vec<StepMetrics>> {
        let mut log = match &options.metrics_log {
            Some(p) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            ),
            None => None,
        };
        let mut all = Vec::new();
        while self.state.iteration < self.config.iterations {
            let m = match self.train_step() {
                Ok(m) => m,
                Err(e @ Error::Numerical { .. }) => {
                    if let Some(dir) = &options.checkpoint_dir {
                        let path = dir.join(format!("abort-{:08}.safetensors", self.state.iteration));
                        checkpoint::save_state(&path, &self.config, &self.state)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let (Some(f), Some(p)) = (log.as_mut(), &options.metrics_log) {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            all.push(m);
            let it = self.state.iteration;
            if let Some(dir) = &options.checkpoint_dir {
                if options.checkpoint_every > 0 && it % options.checkpoint_every == 0 && it < self.config.iterations {
                    checkpoint::save_state(checkpoint_path(dir, it), &self.config, &self.state)?;
                }
            }
        }
        if let Some(dir) = &options.checkpoint_dir {
            checkpoint::save_state(checkpoint_path(dir, self.state.iteration), &self.config, &self.state)?;
        }
        Ok(all)
    }
}

/// Slices `planes` out of `volume` and resizes them to `resolution`.
pub fn fake_images(volume: &Volume, planes: &[SlicePlane], resolution: usize) -> Result<Vec<Tensor>> {
    planes
        .iter()
        .map(|&p| Ok(resize_bilinear(&extract(volume.tensor(), p)?, resolution, resolution)))
        .collect()
}

/// Generator loss against critic `n` on `planes` of the training-mode
/// volume synthesized from `z`, and its parameter gradient.
pub fn generator_gradient(
    generator: &mut Generator,
    critics: &Discriminators,
    n: usize,
    z: &NoisePyramid,
    planes: &[SlicePlane],
) -> Result<(f64, Generator)> {
    let edge = z.output_edge();
    let (volume, cache) = generator.forward_train(z)?;
    let fakes = fake_images(&volume, planes, critics.resolution())?;
    let (loss, dfakes) = generator_objective(critics, n, &fakes)?;
    let mut dvol = Tensor::zeros(volume.tensor().shape());
    for (&plane, d) in planes.iter().zip(&dfakes) {
        let ds = resize_bilinear_backward(d, edge, edge);
        scatter(&ds, plane, &mut dvol)?;
    }
    Ok((loss, generator.backward(&cache, &dvol)))
}

fn all_finite<P: Parameters>(model: &P) -> bool {
    model.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
}

impl AdversarialModels for Trainer {
    fn scales(&self) -> usize {
        self.config.scales
    }

    fn schedule_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.state.rng
    }

    fn update_critic(&mut self, n: usize) -> Result<CriticLosses> {
        let edge = self.schedule.crop_size(n)?;
        let r = self.config.resolution;
        let gcfg = self.state.generator.config().clone();
        let z = make_noise_pyramid(edge, gcfg.levels, gcfg.noise_channels, &mut self.state.rng)?;
        let (volume, _) = self.state.generator.forward_train(&z)?;
        let planes = self.sample_planes(edge)?;
        let fakes = fake_images(&volume, &planes, r)?;
        let reals = planes
            .iter()
            .map(|&p| {
                let ex = &self.exemplars[self.directions.exemplar_for_plane(p)];
                Ok(crop_patch(ex, n, &self.schedule, &mut self.state.rng)?.pixels)
            })
            .collect::<Result<Vec<_>>>()?;
        let critic = &self.state.critics.critics[n - 1];
        let mut grad = critic.zeros_like();
        let losses = critic_objective(
            &self.state.critics,
            n,
            &fakes,
            &reals,
            self.config.gp_weight,
            &mut self.state.rng,
            Some(&mut grad),
        )?;
        if !losses.is_finite() {
            return Err(self.numerical(format!("critic {n} losses are not finite: {losses:?}")));
        }
        let adam = Adam::new(self.config.lr_critic, self.config.adam_betas[0], self.config.adam_betas[1]);
        adam.step(
            &mut self.state.critics.critics[n - 1],
            &grad,
            &mut self.state.critic_opts[n - 1],
        );
        if !all_finite(&self.state.critics.critics[n - 1]) {
            return Err(self.numerical(format!("critic {n} parameters became non-finite")));
        }
        Ok(losses)
    }

    fn update_generator(&mut self, n: usize) -> Result<f64> {
        let edge = self.schedule.crop_size(n)?;
        let gcfg = self.state.generator.config().clone();
        let z = make_noise_pyramid(edge, gcfg.levels, gcfg.noise_channels, &mut self.state.rng)?;
        let planes = self.sample_planes(edge)?;
        let (loss, grad) = generator_gradient(&mut self.state.generator, &self.state.critics, n, &z, &planes)?;
        if !loss.is_finite() {
            return Err(self.numerical(format!("generator loss at scale {n} is not finite: {loss}")));
        }
        let adam = Adam::new(self.config.lr_generator, self.config.adam_betas[0], self.config.adam_betas[1]);
        adam.step(&mut self.state.generator, &grad, &mut self.state.generator_opt);
        if !all_finite(&self.state.generator) {
            return Err(self.numerical("generator parameters became non-finite".into()));
        }
        Ok(loss)
    }
}
