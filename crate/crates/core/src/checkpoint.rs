//! Binary checkpoint format.
//!
//! ```text
//! "TRIG" | version: u32 LE | header_len: u64 LE | header (JSON) | payload
//! ```
//!
//! The header holds the configuration, a directory of parameter tensors
//! (name, dtype, shape, byte offset into the payload), the optimizer slots,
//! the shuffle RNG position and the epoch/step counters. Payloads are raw
//! little-endian `f32`. Serialization is canonical: saving a loaded
//! checkpoint reproduces the original bytes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{streams, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"TRIG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u64,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos() as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos as u128);
        rng
    }

    pub fn fresh(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(streams::SHUFFLE);
        Self::capture(seed, &rng)
    }
}

/// Optimizer accumulators as named slots, each with one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: String,
    pub t: u64,
    pub slots: Vec<(String, Vec<Vec<f32>>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub epoch: usize,
    pub step: usize,
    pub best_val_acc: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: String,
    t: u64,
    /// `slot/parameter` names, in payload order after the parameters.
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
    optimizer: OptimizerHeader,
    rng: RngState,
    epoch: usize,
    step: usize,
    /// `null` before any validation.
    best_val_acc: Option<f64>,
}

impl Checkpoint {
    /// A checkpoint for freshly initialized parameters.
    pub fn initial(model: &crate::model::Model<f32>, train: Option<TrainConfig>, seed: u64) -> Self {
        let cfg = train.as_ref().map(|t| t.optimizer.clone()).unwrap_or_default();
        let opt = crate::training::Optimizer::new(&cfg, &model.params);
        Self {
            model: model.config.clone(),
            train,
            params: model.params.clone(),
            optimizer: opt.to_state(),
            rng: RngState::fresh(seed),
            epoch: 0,
            step: 0,
            best_val_acc: f64::NEG_INFINITY,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let push = |name: String, shape: &[usize], data: &[f32], payload: &mut Vec<u8>| {
            let entry = TensorEntry {
                name,
                dtype: f32::DTYPE.into(),
                shape: shape.to_vec(),
                offset: payload.len() as u64,
            };
            for &v in data {
                v.write_le(payload);
            }
            entry
        };
        let tensors = self
            .params
            .iter()
            .map(|(_, name, t)| push(name.to_owned(), t.shape(), t.data(), &mut payload))
            .collect();
        let mut opt_tensors = Vec::new();
        for (slot, buffers) in &self.optimizer.slots {
            if buffers.len() != self.params.len() {
                return Err(Error::Checkpoint(format!("optimizer slot {slot} has the wrong tensor count")));
            }
            for ((_, name, t), buf) in self.params.iter().zip(buffers) {
                if buf.len() != t.len() {
                    return Err(Error::Checkpoint(format!("optimizer slot {slot}/{name} has the wrong size")));
                }
                opt_tensors.push(push(format!("{slot}/{name}"), t.shape(), buf, &mut payload));
            }
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            tensors,
            optimizer: OptimizerHeader {
                kind: self.optimizer.kind.clone(),
                t: self.optimizer.t,
                tensors: opt_tensors,
            },
            rng: self.rng.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_acc: self.best_val_acc.is_finite().then_some(self.best_val_acc),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_owned());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing TRIG magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];

        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            if e.dtype != f32::DTYPE {
                return Err(Error::Checkpoint(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * f32::BYTES;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
            Ok(Tensor::new(&e.shape, raw.chunks(f32::BYTES).map(f32::read_le).collect()))
        };

        let mut params = ParamStore::new();
        for e in &header.tensors {
            if params.id(&e.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
            params.add(e.name.clone(), read(e)?);
        }
        let mut slots: Vec<(String, Vec<Vec<f32>>)> = Vec::new();
        for e in &header.optimizer.tensors {
            let (slot, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer tensor name {}", e.name)))?;
            let expected = header.tensors.get(slots.last().map_or(0, |(s, v)| if s == slot { v.len() } else { 0 }));
            if expected.map(|t| t.name.as_str()) != Some(name) {
                return Err(Error::Checkpoint(format!("optimizer tensor {} out of order", e.name)));
            }
            let data = read(e)?.into_data();
            match slots.last_mut() {
                Some((s, v)) if s == slot => v.push(data),
                _ => slots.push((slot.to_owned(), vec![data])),
            }
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
            optimizer: OptimizerState {
                kind: header.optimizer.kind,
                t: header.optimizer.t,
                slots,
            },
            rng: header.rng,
            epoch: header.epoch,
            step: header.step,
            best_val_acc: header.best_val_acc.unwrap_or(f64::NEG_INFINITY),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Total scalar count in the parameter directory.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn into_model(self) -> Result<crate::model::Model<f32>> {
        crate::model::Model::from_params(self.model, self.params)
    }
}
