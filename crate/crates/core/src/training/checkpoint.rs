use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, ReduceLrOnPlateau, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("corrupt rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub epoch: usize,
    pub global_step: u64,
    pub config_hash: String,
    pub config_toml: String,
    pub rng: RngState,
    pub scheduler: ReduceLrOnPlateau,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_toml)
    }
}

struct Blob {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Blob {
    fn push(&mut self, name: String, shape: &[usize], values: &[f64]) {
        self.entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
    }

    fn store(&mut self, prefix: &str, store: &ParamStore) {
        for p in store.all() {
            let t = p.get();
            self.push(format!("{prefix}/{}", p.name()), t.shape(), t.data());
        }
    }

    fn moments(&mut self, prefix: &str, opt: &Adam, store: &ParamStore) {
        for p in store.trainable() {
            if let (Some(m), Some(v)) = (opt.m.get(p.name()), opt.v.get(p.name())) {
                self.push(format!("{prefix}.m/{}", p.name()), &p.shape(), m);
                self.push(format!("{prefix}.v/{}", p.name()), &p.shape(), v);
            }
        }
    }
}

/// Writes header and tensor blob into `dir`, replacing any previous content.
pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    let mut blob = Blob {
        entries: Vec::new(),
        data: Vec::new(),
    };
    blob.store("generator", trainer.generator.store());
    blob.store("discriminator", trainer.discriminator.store());
    blob.moments("g_opt", &trainer.g_opt, trainer.generator.store());
    blob.moments("d_opt", &trainer.d_opt, trainer.discriminator.store());
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        epoch: trainer.epoch,
        global_step: trainer.global_step,
        config_hash: trainer.cfg.hash()?,
        config_toml: trainer.cfg.to_toml()?,
        rng: RngState::capture(&trainer.rng),
        scheduler: trainer.scheduler.clone(),
        g_opt: trainer.g_opt.clone(),
        d_opt: trainer.d_opt.clone(),
        best_metric: trainer.best_metric,
        best_epoch: trainer.best_epoch,
        tensors: blob.entries,
    };
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let bytes: Vec<u8> = blob.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(tmp.join(CHECKPOINT_BLOB), bytes).map_err(|e| Error::io(tmp.join(CHECKPOINT_BLOB), e))?;
    fs::write(tmp.join(CHECKPOINT_HEADER), serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(tmp.join(CHECKPOINT_HEADER), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join(CHECKPOINT_HEADER);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} is not supported",
            path.display(),
            header.format_version
        )));
    }
    Ok(header)
}

fn read_tensors(dir: &Path, header: &CheckpointHeader) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join(CHECKPOINT_BLOB);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{}: truncated blob", path.display())));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut out = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let slice = data
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: {} lies outside the blob", path.display(), e.name)))?;
        out.insert(e.name.clone(), Tensor::new(slice.to_vec(), &e.shape)?);
    }
    Ok(out)
}

fn fill_store(prefix: &str, store: &ParamStore, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    for p in store.all() {
        let key = format!("{prefix}/{}", p.name());
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if t.shape() != p.shape().as_slice() {
            return Err(Error::Checkpoint(format!("{key}: shape {:?} vs model {:?}", t.shape(), p.shape())));
        }
        p.set(t.clone())?;
    }
    Ok(())
}

fn fill_moments(prefix: &str, opt: &mut Adam, store: &ParamStore, tensors: &BTreeMap<String, Tensor>) {
    for p in store.trainable() {
        let m = tensors.get(&format!("{prefix}.m/{}", p.name()));
        let v = tensors.get(&format!("{prefix}.v/{}", p.name()));
        if let (Some(m), Some(v)) = (m, v) {
            opt.m.insert(p.name().to_string(), m.to_vec());
            opt.v.insert(p.name().to_string(), v.to_vec());
        }
    }
}

/// Rebuilds a trainer from a checkpoint directory. When `expect` is given its
/// hash must equal the stored configuration hash.
pub fn load_checkpoint(dir: &Path, expect: Option<&RunConfig>) -> Result<Trainer> {
    let header = read_header(dir)?;
    let cfg = header.config()?;
    if cfg.hash()? != header.config_hash {
        return Err(Error::Checkpoint(format!("{}: configuration hash does not match its text", dir.display())));
    }
    if let Some(expect) = expect {
        if expect.hash()? != header.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint was written under a different configuration",
                dir.display()
            )));
        }
    }
    let tensors = read_tensors(dir, &header)?;
    let mut t = Trainer::new(&cfg)?;
    fill_store("generator", t.generator.store(), &tensors)?;
    fill_store("discriminator", t.discriminator.store(), &tensors)?;
    t.g_opt = header.g_opt.clone();
    t.d_opt = header.d_opt.clone();
    fill_moments("g_opt", &mut t.g_opt, t.generator.store(), &tensors);
    fill_moments("d_opt", &mut t.d_opt, t.discriminator.store(), &tensors);
    t.scheduler = header.scheduler.clone();
    t.rng = header.rng.restore()?;
    t.epoch = header.epoch;
    t.global_step = header.global_step;
    t.best_metric = header.best_metric;
    t.best_epoch = header.best_epoch;
    Ok(t)
}

/// Configuration and generator of a checkpoint, without the training state.
pub fn load_generator(dir: &Path) -> Result<(RunConfig, Generator)> {
    let header = read_header(dir)?;
    let cfg = header.config()?;
    let tensors = read_tensors(dir, &header)?;
    let g = Generator::new(&cfg.generator, &cfg.train.ablation, cfg.train.generator_seed())?;
    fill_store("generator", g.store(), &tensors)?;
    Ok((cfg, g))
}
