//! Self-describing binary container for datasets and checkpoints.
//!
//! Layout: the magic bytes `MNPE`, a one-byte kind tag, a little-endian
//! `u16` version, a little-endian `u64` header length, a JSON header, and
//! then the raw blocks in header order. `f64` blocks are little-endian;
//! mask blocks hold one byte (0 or 1) per entry.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{AdamConfig, AdamState};
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::fusion::Architecture;
use crate::model::{NetworkConfig, PosteriorModel};
use crate::simulators::Task;
use crate::tensor::Tensor;
use crate::train::{EpochRecord, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"MNPE";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Dataset = 1,
    Checkpoint = 2,
}

impl ContainerKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Self::Dataset),
            2 => Ok(Self::Checkpoint),
            t => Err(Error::Format(format!("unknown container kind {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    F64(Tensor),
    Mask { shape: Vec<usize>, values: Vec<bool> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: ContainerKind,
    config: Value,
    meta: Value,
    blocks: Vec<BlockHeader>,
}

/// A container in memory. `config` echoes whatever produced the content.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub config: Value,
    pub meta: Value,
    pub blocks: Vec<(String, Block)>,
}

impl Container {
    pub fn new(kind: ContainerKind, config: Value, meta: Value) -> Self {
        Self { kind, config, meta, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, block: Block) {
        self.blocks.push((name.into(), block));
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.block(name)? {
            Block::F64(t) => Ok(t),
            Block::Mask { .. } => Err(Error::Format(format!("block `{name}` is a mask, not a tensor"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|(name, b)| match b {
                    Block::F64(t) => BlockHeader { name: name.clone(), dtype: "f64".into(), shape: t.shape().to_vec() },
                    Block::Mask { shape, .. } => {
                        BlockHeader { name: name.clone(), dtype: "u8".into(), shape: shape.clone() }
                    }
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(15 + json.len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in &self.blocks {
            match b {
                Block::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Block::Mask { values, .. } => out.extend(values.iter().map(|&v| u8::from(v))),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 15 || &bytes[..4] != MAGIC {
            return Err(fail("not a container file"));
        }
        let kind = ContainerKind::from_tag(bytes[4])?;
        let version = u16::from_le_bytes([bytes[5], bytes[6]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let len = u64::from_le_bytes(bytes[7..15].try_into().expect("eight bytes")) as usize;
        let body = bytes.get(15..15 + len).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.kind != kind {
            return Err(fail("kind tag disagrees with header"));
        }
        let mut pos = 15 + len;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for bh in header.blocks {
            let n: usize = bh.shape.iter().product();
            let block = match bh.dtype.as_str() {
                "f64" => {
                    let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| fail("truncated block"))?;
                    pos += 8 * n;
                    let data =
                        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
                    Block::F64(Tensor::new(bh.shape, data)?)
                }
                "u8" => {
                    let raw = bytes.get(pos..pos + n).ok_or_else(|| fail("truncated block"))?;
                    pos += n;
                    if raw.iter().any(|&b| b > 1) {
                        return Err(fail("mask bytes must be 0 or 1"));
                    }
                    Block::Mask { shape: bh.shape, values: raw.iter().map(|&b| b == 1).collect() }
                }
                other => return Err(Error::Format(format!("unknown block type `{other}`"))),
            };
            blocks.push((bh.name, block));
        }
        if pos != bytes.len() {
            return Err(fail("trailing bytes after the last block"));
        }
        Ok(Self { kind, config: header.config, meta: header.meta, blocks })
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path, kind: ContainerKind) -> Result<Self> {
        let c = Self::from_bytes(&fs::read(path)?)?;
        if c.kind != kind {
            return Err(Error::Format(format!("{} holds a {:?}, expected {kind:?}", path.display(), c.kind)));
        }
        Ok(c)
    }
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().ok_or_else(|| Error::Format(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Where a simulated dataset file came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOrigin {
    pub master_seed: u64,
    pub stream: u64,
    pub offset: u64,
    pub param_names: Vec<String>,
    pub source_names: Vec<String>,
    /// Diffusion walks redrawn because they hit the time cap.
    pub resamples: usize,
}

pub fn dataset_container(task: &Task, data: &Dataset, origin: &DatasetOrigin) -> Result<Container> {
    let mut c = Container::new(ContainerKind::Dataset, serde_json::to_value(task)?, serde_json::to_value(origin)?);
    c.push("params", Block::F64(data.params.clone()));
    for (name, s) in origin.source_names.iter().zip(&data.sources) {
        c.push(format!("source.{name}"), Block::F64(s.clone()));
    }
    Ok(c)
}

pub fn write_dataset(path: &Path, task: &Task, data: &Dataset, origin: &DatasetOrigin) -> Result<()> {
    dataset_container(task, data, origin)?.write(path)
}

pub fn read_dataset(path: &Path) -> Result<(Task, Dataset, DatasetOrigin)> {
    parse_dataset(&fs::read(path)?)
}

/// Decodes the bytes of a dataset file.
pub fn parse_dataset(bytes: &[u8]) -> Result<(Task, Dataset, DatasetOrigin)> {
    let c = Container::from_bytes(bytes)?;
    if c.kind != ContainerKind::Dataset {
        return Err(Error::Format(format!("expected a dataset, found a {:?}", c.kind)));
    }
    let task: Task = serde_json::from_value(c.config.clone())?;
    let origin: DatasetOrigin = serde_json::from_value(c.meta.clone())?;
    let sources =
        origin.source_names.iter().map(|n| c.tensor(&format!("source.{n}")).cloned()).collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(c.tensor("params")?.clone(), sources)?;
    Ok((task, data, origin))
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub architecture: Architecture,
    pub network: NetworkConfig,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("malformed generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    standardizer: Standardizer,
    train_config: TrainConfig,
    adam_config: AdamConfig,
    adam_step: u64,
    epoch: usize,
    history: Vec<EpochRecord>,
    rng: RngState,
}

pub fn checkpoint_container(spec: &ModelSpec, model: &PosteriorModel, trainer: &Trainer) -> Result<Container> {
    let meta = CheckpointMeta {
        standardizer: model.standardizer.clone(),
        train_config: trainer.config.clone(),
        adam_config: trainer.adam_config,
        adam_step: trainer.adam.step,
        epoch: trainer.epoch,
        history: trainer.history.clone(),
        rng: RngState::capture(&trainer.rng),
    };
    let mut c = Container::new(ContainerKind::Checkpoint, serde_json::to_value(spec)?, serde_json::to_value(&meta)?);
    for (name, t, _) in model.store.iter() {
        c.push(format!("param/{name}"), Block::F64(t.clone()));
    }
    for (name, t) in &trainer.adam.first {
        c.push(format!("adam.first/{name}"), Block::F64(t.clone()));
    }
    for (name, t) in &trainer.adam.second {
        c.push(format!("adam.second/{name}"), Block::F64(t.clone()));
    }
    Ok(c)
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, model: &PosteriorModel, trainer: &Trainer) -> Result<()> {
    checkpoint_container(spec, model, trainer)?.write(path)
}

/// Rebuilds the model and trainer; parameter names and shapes must match
/// the architecture described in the file.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, PosteriorModel, Trainer)> {
    let c = Container::read(path, ContainerKind::Checkpoint)?;
    let spec: ModelSpec = serde_json::from_value(c.config.clone())?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    let mut model = PosteriorModel::new(&spec.task, spec.architecture, &spec.network, spec.init_seed)?;
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    let mut loaded = 0;
    for (name, block) in &c.blocks {
        let Block::F64(t) = block else {
            return Err(Error::Format(format!("unexpected mask block `{name}`")));
        };
        if let Some(p) = name.strip_prefix("param/") {
            let slot = model.store.get_mut(p)?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{p}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
            loaded += 1;
        } else if let Some(p) = name.strip_prefix("adam.first/") {
            first.insert(p.to_string(), t.clone());
        } else if let Some(p) = name.strip_prefix("adam.second/") {
            second.insert(p.to_string(), t.clone());
        } else {
            return Err(Error::Format(format!("unknown block `{name}`")));
        }
    }
    if loaded != model.store.len() {
        return Err(Error::Format(format!("checkpoint holds {loaded} of {} parameters", model.store.len())));
    }
    model.standardizer = meta.standardizer;
    let trainer = Trainer {
        config: meta.train_config,
        adam: AdamState { step: meta.adam_step, first, second },
        adam_config: meta.adam_config,
        epoch: meta.epoch,
        rng: meta.rng.restore()?,
        history: meta.history,
    };
    Ok((spec, model, trainer))
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;
    use crate::simulators::{simulate_many, Exp1Config};

    fn small_network() -> NetworkConfig {
        let mut n = NetworkConfig::exp1();
        n.model_dim = 8;
        n.embed_attention.key_dim = 4;
        n.cross_attention.key_dim = 4;
        n
    }

    #[test]
    fn container_round_trips() {
        let mut c = Container::new(ContainerKind::Dataset, serde_json::json!({"a": 1.5}), serde_json::json!(null));
        c.push("t", Block::F64(Tensor::new([2, 2], vec![0.1, -2.0, f64::MAX, 1e-300]).unwrap()));
        c.push("m", Block::Mask { shape: vec![3], values: vec![true, false, true] });
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MNPE");
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(Container::from_bytes(&wrong).is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let task = Task::Exp1(Exp1Config::default());
        let data = Dataset::from_draws(&simulate_many(&task, 3, 1, 0, 4, 1).unwrap()).unwrap();
        let origin = DatasetOrigin {
            master_seed: 3,
            stream: 1,
            offset: 0,
            param_names: task.param_names(),
            source_names: vec!["x".into(), "y".into()],
            resamples: 0,
        };
        let path = dir.path().join("train.mnpe");
        write_dataset(&path, &task, &data, &origin).unwrap();
        let (t2, d2, o2) = read_dataset(&path).unwrap();
        assert_eq!((t2, d2, o2), (task, data, origin));
        assert!(Container::read(&path, ContainerKind::Checkpoint).is_err());
    }

    #[test]
    fn checkpoint_reproduces_log_prob_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let task = Task::Exp1(Exp1Config { dim: 3, ..Exp1Config::default() });
        let data = Dataset::from_draws(&simulate_many(&task, 4, 1, 0, 32, 1).unwrap()).unwrap();
        let spec = ModelSpec {
            task: task.clone(),
            architecture: Architecture::Hybrid,
            network: small_network(),
            init_seed: 9,
        };
        let mut model = PosteriorModel::new(&task, spec.architecture, &spec.network, spec.init_seed).unwrap();
        let config = TrainConfig { simulations: 32, epochs: 2, learning_rate: 1e-3, seed: 2, ..TrainConfig::default() };
        let mut trainer = Trainer::start(&mut model, &data, &config).unwrap();
        trainer.run_epoch(&mut model, &data, &data.range(0, 8)).unwrap();

        let path = dir.path().join("ckpt.mnpe");
        save_checkpoint(&path, &spec, &model, &trainer).unwrap();
        let (spec2, mut model2, mut trainer2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec2, spec);
        let a = model.log_prob(&data.params, &data.sources, None).unwrap();
        let b = model2.log_prob(&data.params, &data.sources, None).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(trainer2.rng.clone().next_u64(), trainer.rng.clone().next_u64());

        // resuming continues exactly as the uninterrupted run
        trainer.run_epoch(&mut model, &data, &data.range(0, 8)).unwrap();
        trainer2.run_epoch(&mut model2, &data, &data.range(0, 8)).unwrap();
        assert_eq!(model.store, model2.store);
        assert_eq!(trainer.history, trainer2.history);
    }
}
