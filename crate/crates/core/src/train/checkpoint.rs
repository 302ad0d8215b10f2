//! Checkpoint directories: `manifest.json` plus `weights.bin` holding every
//! tensor as little-endian f32 in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tape::ParamStore;
use crate::tensor::Tensor;
use crate::train::adamw::OptimizerState;
use crate::train::config::{MetaConfig, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Generator state of the trainer: one stream for branch draws, one for data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainStreams {
    pub branch: ChaCha8Rng,
    pub data: ChaCha8Rng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        Self::for_rank(seed, 0)
    }

    /// Rank-private streams, used only when branch synchronisation is disabled.
    pub fn for_rank(seed: u64, rank: usize) -> Self {
        let mut branch = ChaCha8Rng::seed_from_u64(seed);
        branch.set_stream(1 + 2 * rank as u64);
        let mut data = ChaCha8Rng::seed_from_u64(seed);
        data.set_stream(2 + 2 * rank as u64);
        Self { branch, data }
    }

    fn encode(rng: &ChaCha8Rng, out: &mut Vec<u8>) {
        out.extend_from_slice(&rng.get_seed());
        out.extend_from_slice(&rng.get_stream().to_le_bytes());
        out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    }

    fn decode(b: &[u8]) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
        rng.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
        rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
        rng
    }

    pub fn to_hex(&self) -> String {
        let mut bytes = Vec::with_capacity(112);
        Self::encode(&self.branch, &mut bytes);
        Self::encode(&self.data, &mut bytes);
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::CorruptCheckpoint(format!("rng state: {e}")))?;
        if bytes.len() != 112 {
            return Err(Error::CorruptCheckpoint(format!("rng state of {} bytes, expected 112", bytes.len())));
        }
        Ok(Self { branch: Self::decode(&bytes[..56]), data: Self::decode(&bytes[56..]) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfigs {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub meta: MetaConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
    pub config: RunConfigs,
    pub rng: String,
    pub optimizer_step: u64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub config: RunConfigs,
    pub store: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub streams: TrainStreams,
}

/// Steps at which a run writes checkpoints: 0 and every multiple of `every` up to `total`.
pub fn checkpoint_steps(total: usize, every: usize) -> Vec<usize> {
    (0..=total).step_by(every.max(1)).collect()
}

pub fn checkpoint_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("step_{step:06}"))
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[f32]| {
        tensors.push(TensorEntry { name, shape: shape.to_vec(), dtype: "f32".into(), offset: bytes.len() as u64 });
        data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    };
    for (_, name, t) in ckpt.store.iter() {
        push(name.to_string(), t.shape(), t.data());
    }
    for (i, (_, name, t)) in ckpt.store.iter().enumerate() {
        push(format!("{M_PREFIX}{name}"), t.shape(), &ckpt.optimizer.m[i]);
        push(format!("{V_PREFIX}{name}"), t.shape(), &ckpt.optimizer.v[i]);
    }
    let manifest = Manifest {
        step: ckpt.step,
        tensors,
        config: ckpt.config.clone(),
        rng: ckpt.streams.to_hex(),
        optimizer_step: ckpt.optimizer.step,
    };
    fs::write(dir.join(WEIGHTS), &bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS))?;
    let corrupt = |m: String| Err(Error::CorruptCheckpoint(m));
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype));
        }
        if e.offset != expected {
            return corrupt(format!("{}: offset {} but previous tensors end at {expected}", e.name, e.offset));
        }
        let n: usize = e.shape.iter().product();
        let end = expected + 4 * n as u64;
        if end > bytes.len() as u64 {
            return corrupt(format!("{}: extends past the {}-byte weight file", e.name, bytes.len()));
        }
        let data: Vec<f32> = bytes[expected as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t =
            Tensor::new(e.shape.clone(), data).map_err(|err| Error::CorruptCheckpoint(format!("{}: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
        expected = end;
    }
    if expected != bytes.len() as u64 {
        return corrupt(format!("manifest covers {expected} bytes, weight file has {}", bytes.len()));
    }

    let mut store = ParamStore::new();
    let mut moments = std::collections::HashMap::new();
    for (name, t) in tensors {
        if name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) {
            moments.insert(name, t.into_data());
        } else {
            store.add(name, t);
        }
    }
    let mut optimizer = OptimizerState { step: manifest.optimizer_step, m: Vec::new(), v: Vec::new() };
    for (_, name, t) in store.iter() {
        for (prefix, dst) in [(M_PREFIX, &mut optimizer.m), (V_PREFIX, &mut optimizer.v)] {
            match moments.remove(&format!("{prefix}{name}")) {
                Some(d) if d.len() == t.len() => dst.push(d),
                _ => return corrupt(format!("missing or misshapen optimizer moment for {name}")),
            }
        }
    }
    if let Some(extra) = moments.keys().next() {
        return corrupt(format!("optimizer moment {extra} has no parameter"));
    }
    Ok(Checkpoint {
        step: manifest.step,
        config: manifest.config,
        store,
        optimizer,
        streams: TrainStreams::from_hex(&manifest.rng)?,
    })
}
