//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use solidtex::evaluation::EvalOptions;
use solidtex::exemplar::Direction;
use solidtex::trainer::TrainConfig;
use solidtex::{Error, Result};

/// Environment variable consulted when `front_end_weights` is unset.
pub const FRONT_END_ENV: &str = "SOLIDTEX_FRONT_END";

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarEntry {
    pub path: PathBuf,
    #[serde(default = "all_directions")]
    pub direction: Direction,
}

fn all_directions() -> Direction {
    Direction::All
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub exemplar: Vec<ExemplarEntry>,
    /// Iterations between checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub front_end_weights: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for ex in &mut cfg.exemplar {
            ex.path = base.join(&ex.path);
        }
        if let Some(p) = &mut cfg.front_end_weights {
            *p = base.join(&*p);
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    /// Checks everything that does not require training.
    pub fn validate(&self) -> Result<()> {
        if self.exemplar.is_empty() {
            return Err(Error::Config("`exemplar`: at least one [[exemplar]] entry is required".into()));
        }
        for (i, ex) in self.exemplar.iter().enumerate() {
            if !ex.path.is_file() {
                return Err(Error::Config(format!(
                    "`exemplar[{i}].path`: {} does not exist",
                    ex.path.display()
                )));
            }
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("`train`: {}", strip_kind(&e))))?;
        if self.train.front_end && self.front_end_path().is_none() {
            return Err(Error::Config(format!(
                "`front_end_weights`: the front-end is enabled but neither the key nor {FRONT_END_ENV} is set"
            )));
        }
        if self.eval.slices_per_axis == 0 || self.eval.bins < 2 {
            return Err(Error::Config(
                "`eval`: slices_per_axis must be at least 1 and bins at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn front_end_path(&self) -> Option<PathBuf> {
        self.front_end_weights
            .clone()
            .or_else(|| std::env::var_os(FRONT_END_ENV).map(PathBuf::from))
    }
}

pub(crate) fn strip_kind(e: &Error) -> String {
    match e {
        Error::Validation(m) | Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
