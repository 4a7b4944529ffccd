//! Training checkpoints as safetensors archives.
//!
//! Every trainable tensor, normalization buffer and optimizer moment is
//! stored flat as little-endian `F64` under a dotted name. The header
//! metadata carries the format tag, the format version, the training
//! configuration as JSON, the iteration counter and the random stream
//! position, so a loaded state continues bit-identically.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::frontend::{decode, FrontEnd};
use crate::generator::Generator;
use crate::nn::{AdamState, Parameters};
use crate::trainer::{ModelState, TrainConfig};

pub const FORMAT_TAG: &str = "solidtex-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

struct Writer {
    tensors: Vec<(String, Vec<u8>, usize)>,
    metadata: HashMap<String, String>,
}

impl Writer {
    fn push(&mut self, name: String, data: &[f64]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors.push((name, bytes, data.len()));
    }

    fn push_params<P: Parameters>(&mut self, prefix: &str, model: &P) {
        for (name, data) in model.params() {
            self.push(format!("{prefix}.{name}"), data);
        }
    }

    fn write(self, path: &Path) -> Result<()> {
        let views = self
            .tensors
            .iter()
            .map(|(name, bytes, len)| {
                let view = TensorView::new(Dtype::F64, vec![*len], bytes).map_err(|e| Error::Format(e.to_string()))?;
                Ok((name.clone(), view))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes =
            safetensors::serialize(views, &Some(self.metadata)).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    st: SafeTensors<'a>,
    metadata: HashMap<String, String>,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Format(format!("{}: not a checkpoint: {e}", path.display())))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        match metadata.get("format") {
            Some(tag) if tag == FORMAT_TAG => {}
            _ => return Err(Error::Format(format!("{}: missing `{FORMAT_TAG}` tag", path.display()))),
        }
        let version = metadata.get("version").map(String::as_str).unwrap_or("");
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Config(format!(
                "{}: checkpoint version `{version}` is not supported (expected {FORMAT_VERSION})",
                path.display()
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Reader { st, metadata })
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint metadata `{key}` is malformed")))
    }

    fn fill(&self, name: &str, dst: &mut [f64]) -> Result<()> {
        let view = self
            .st
            .tensor(name)
            .map_err(|_| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        let data = decode(view.dtype(), view.data())
            .ok_or_else(|| Error::Format(format!("checkpoint tensor `{name}` is not a float tensor")))?;
        if data.len() != dst.len() {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` has {} values, expected {}",
                data.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&data);
        Ok(())
    }

    fn fill_params<P: Parameters>(&self, prefix: &str, model: &mut P) -> Result<()> {
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(model.params_mut()) {
            self.fill(&format!("{prefix}.{name}"), dst)?;
        }
        Ok(())
    }

    fn config(&self) -> Result<TrainConfig> {
        serde_json::from_str(self.meta("config")?)
            .map_err(|e| Error::Format(format!("checkpoint configuration is malformed: {e}")))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn push_adam<P: Parameters>(w: &mut Writer, prefix: &str, opt: &AdamState<P>) {
    w.push_params(&format!("{prefix}.adam_m"), &opt.m);
    w.push_params(&format!("{prefix}.adam_v"), &opt.v);
    w.metadata.insert(format!("{prefix}.adam_steps"), opt.steps.to_string());
}

fn fill_adam<P: Parameters>(r: &Reader<'_>, prefix: &str, opt: &mut AdamState<P>) -> Result<()> {
    r.fill_params(&format!("{prefix}.adam_m"), &mut opt.m)?;
    r.fill_params(&format!("{prefix}.adam_v"), &mut opt.v)?;
    opt.steps = r.meta_parse(&format!("{prefix}.adam_steps"))?;
    Ok(())
}

pub fn save_state(path: impl AsRef<Path>, config: &TrainConfig, state: &ModelState) -> Result<()> {
    let mut w = Writer {
        tensors: Vec::new(),
        metadata: HashMap::new(),
    };
    let m = &mut w.metadata;
    m.insert("format".into(), FORMAT_TAG.into());
    m.insert("version".into(), FORMAT_VERSION.to_string());
    m.insert("config".into(), serde_json::to_string(config).expect("config serializes"));
    m.insert("iteration".into(), state.iteration.to_string());
    m.insert("rng_seed".into(), hex(&state.rng.get_seed()));
    m.insert("rng_stream".into(), state.rng.get_stream().to_string());
    m.insert("rng_word_pos".into(), state.rng.get_word_pos().to_string());
    if let Some(fe) = &state.critics.front_end {
        m.insert("front_end_sha256".into(), fe.checksum());
    }
    w.push_params("generator", &state.generator);
    for (name, data) in state.generator.buffers() {
        w.push(format!("generator.{name}"), data);
    }
    push_adam(&mut w, "generator", &state.generator_opt);
    for (i, (c, opt)) in state.critics.critics.iter().zip(&state.critic_opts).enumerate() {
        let prefix = format!("critic{}", i + 1);
        w.push_params(&prefix, c);
        push_adam(&mut w, &prefix, opt);
    }
    w.write(path.as_ref())
}

/// The training configuration stored in a checkpoint.
pub fn read_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    Reader::new(&bytes, path)?.config()
}

fn load_generator_from(r: &Reader<'_>, config: &TrainConfig) -> Result<Generator> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Generator::new(config.generator.clone(), &mut rng)?;
    r.fill_params("generator", &mut g)?;
    let names: Vec<String> = g.buffers().into_iter().map(|(n, _)| n).collect();
    for (name, dst) in names.iter().zip(g.buffers_mut()) {
        r.fill(&format!("generator.{name}"), dst)?;
    }
    Ok(g)
}

/// Only the generator, for synthesis.
pub fn load_generator(path: impl AsRef<Path>) -> Result<(Generator, TrainConfig)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let r = Reader::new(&bytes, path)?;
    let config = r.config()?;
    Ok((load_generator_from(&r, &config)?, config))
}

fn same_architecture(a: &TrainConfig, b: &TrainConfig) -> bool {
    a.scales == b.scales
        && a.resolution == b.resolution
        && a.front_end == b.front_end
        && a.generator == b.generator
        && a.critic == b.critic
}

/// Full training state. `config` must describe the same architecture as
/// the saved one; the iteration budget and optimizer settings may differ.
pub fn load_state(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    front_end: Option<Arc<FrontEnd>>,
) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let r = Reader::new(&bytes, path)?;
    let saved = r.config()?;
    if !same_architecture(&saved, config) {
        return Err(Error::Config(format!(
            "{}: checkpoint architecture does not match the configuration",
            path.display()
        )));
    }
    if let Some(fe) = &front_end {
        let sum = r.metadata.get("front_end_sha256").map(String::as_str).unwrap_or("");
        if sum != fe.checksum() {
            return Err(Error::Config(format!(
                "{}: front-end weights differ from the ones used for training",
                path.display()
            )));
        }
    }
    let mut state = ModelState::init(config, front_end)?;
    state.generator = load_generator_from(&r, config)?;
    fill_adam(&r, "generator", &mut state.generator_opt)?;
    for i in 0..config.scales {
        let prefix = format!("critic{}", i + 1);
        r.fill_params(&prefix, &mut state.critics.critics[i])?;
        fill_adam(&r, &prefix, &mut state.critic_opts[i])?;
    }
    state.iteration = r.meta_parse("iteration")?;
    let seed = unhex(r.meta("rng_seed")?).ok_or_else(|| Error::Format("checkpoint rng seed is malformed".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.meta_parse("rng_stream")?);
    rng.set_word_pos(r.meta_parse("rng_word_pos")?);
    state.rng = rng;
    Ok(state)
}
