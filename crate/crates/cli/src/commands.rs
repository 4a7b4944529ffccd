use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use solidtex::checkpoint::{load_generator, read_config};
use solidtex::evaluation::{
    ablate_scales, ablate_slicing, evaluate, evaluate_volume, histogram_distance, EvalOptions, EvalReport,
};
use solidtex::exemplar::{load_exemplar, Direction, Exemplar};
use solidtex::frontend::FrontEnd;
use solidtex::generator::make_noise_pyramid;
use solidtex::slicer::{slice_at, slice_oblique45};
use solidtex::trainer::{FitOptions, Trainer};
use solidtex::volume_io::{export_slice_stack, load_volume, save_png, save_volume};
use solidtex::{Error, Result, Tensor, Volume};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{strip_kind, RunConfig};
use crate::{AblateArgs, EvalArgs, ExportArgs, Overrides, SliceArgs, SynthArgs, TrainArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Format(_) => 2,
        Error::Numerical { .. } => 3,
        Error::Io { .. } | Error::Image { .. } => 4,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

/// Loads, overrides and validates a run configuration.
fn prepare(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let cfg = load_overridden(path, o)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_overridden(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(i) = o.iterations {
        cfg.train.iterations = i;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(out) = &o.output {
        cfg.output_dir = out.clone();
    }
    if let Some(p) = &o.front_end_weights {
        cfg.front_end_weights = Some(p.clone());
    }
    if o.no_front_end {
        cfg.train.front_end = false;
    }
    Ok(cfg)
}

fn load_inputs(cfg: &RunConfig) -> Result<(Vec<Exemplar>, Option<Arc<FrontEnd>>)> {
    let exemplars = cfg
        .exemplar
        .iter()
        .map(|e| load_exemplar(&e.path, e.direction))
        .collect::<Result<Vec<_>>>()?;
    let front_end = if cfg.train.front_end {
        let path = cfg.front_end_path().expect("validated");
        Some(Arc::new(FrontEnd::load(path)?))
    } else {
        None
    };
    Ok((exemplars, front_end))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = prepare(&a.config, &a.overrides)?;
    if let Some(every) = a.checkpoint_every {
        cfg.checkpoint_every = every;
    }
    let (exemplars, front_end) = load_inputs(&cfg)?;
    create_dir(&cfg.output_dir)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.train.clone(), exemplars.clone(), front_end)?,
        None => Trainer::new(cfg.train.clone(), exemplars.clone(), front_end)?,
    };
    let options = FitOptions {
        checkpoint_dir: Some(cfg.output_dir.clone()),
        checkpoint_every: cfg.checkpoint_every,
        metrics_log: Some(cfg.output_dir.join("metrics.jsonl")),
    };
    trainer.fit(&options)?;
    let report = evaluate(&trainer.state().generator, &cfg.train, &exemplars, &cfg.eval)?;
    write_text(&cfg.output_dir.join("report.json"), &report.to_json())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let (generator, _) = load_generator(&a.checkpoint)?;
    let g = generator.config();
    g.check_edge(a.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let z = make_noise_pyramid(a.size, g.levels, g.noise_channels, &mut rng)?;
    save_volume(&generator.generate(&z)?, &a.output)
}

pub fn slice(a: SliceArgs) -> Result<()> {
    let v = load_volume(&a.volume)?;
    let s = if a.oblique45 {
        slice_oblique45(&v, a.axis, a.offset, None)?
    } else {
        slice_at(&v, a.axis, a.index)?
    };
    save_png(&s.pixels, &a.output)
}

pub fn export(a: ExportArgs) -> Result<()> {
    let v = load_volume(&a.volume)?;
    let n = export_slice_stack(&v, a.axis, &a.output)?;
    println!("wrote {n} slices to {}", a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct ImageSetReport {
    histogram_distance: f64,
    images: usize,
    bins: usize,
}

fn read_png_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| Ok(load_exemplar(p, Direction::All)?.pixels().clone()))
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ex = load_exemplar(&a.exemplar, Direction::All)?;
    let options = EvalOptions {
        volume_edge: a.size,
        slices_per_axis: a.slices,
        bins: a.bins,
        seed: a.seed,
    };
    if let Some(dir) = &a.images {
        let images = read_png_dir(dir)?;
        if images.is_empty() {
            return Err(Error::Validation(format!("{} contains no PNG files", dir.display())));
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let report = ImageSetReport {
            histogram_distance: histogram_distance(&refs, &[ex.pixels()], a.bins)?,
            images: images.len(),
            bins: a.bins,
        };
        return write_json(&a.output, &report);
    }
    let report = if let Some(ckpt) = &a.checkpoint {
        let config = read_config(ckpt)?;
        let (generator, _) = load_generator(ckpt)?;
        evaluate(&generator, &config, &[ex], &options)?
    } else {
        let v = load_volume(a.volume.as_ref().expect("argument group"))?;
        evaluate_volume_file(&v, &ex, &options)?
    };
    write_text(&a.output, &report.to_json())
}

fn evaluate_volume_file(v: &Volume, ex: &Exemplar, options: &EvalOptions) -> Result<EvalReport> {
    let options = EvalOptions {
        volume_edge: v.edge(),
        ..options.clone()
    };
    evaluate_volume(v, std::slice::from_ref(ex), &options, None)
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_overridden(&a.config, &a.overrides)?;
    if a.slicing {
        cfg.validate()?;
    } else {
        // The scale count of the file is replaced by each requested one.
        for &n in &a.scales {
            cfg.train.scales = n;
            cfg.validate()
                .map_err(|e| Error::Config(format!("with --scales {n}: {}", strip_kind(&e))))?;
        }
    }
    let (exemplars, front_end) = load_inputs(&cfg)?;
    create_dir(&cfg.output_dir)?;
    if a.slicing {
        let r = ablate_slicing(&cfg.train, &exemplars, front_end, &cfg.eval)?;
        write_text(&cfg.output_dir.join("slicing-orthogonal.json"), &r.orthogonal.to_json())?;
        write_text(&cfg.output_dir.join("slicing-oblique45.json"), &r.oblique.to_json())?;
        println!(
            "histogram distance gap (oblique - orthogonal): {:+.4}; continuity gap: {:+.4}",
            r.histogram_gap, r.continuity_gap
        );
        write_json(&cfg.output_dir.join("slicing-gap.json"), &r)
    } else {
        let reports = ablate_scales(&cfg.train, &exemplars, front_end, &a.scales, &cfg.eval)?;
        for (n, r) in a.scales.iter().zip(&reports) {
            write_text(&cfg.output_dir.join(format!("scales-{n}.json")), &r.to_json())?;
            println!("scales {n}: histogram distance {:.4}, continuity {:.4}", r.histogram_distance, r.continuity);
        }
        Ok(())
    }
}
