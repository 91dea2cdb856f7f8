//! Binary checkpoint container.
//!
//! Layout: `b"MOECL"`, version byte `0x01`, little-endian `u32` header
//! length, a UTF-8 JSON header (configuration plus a tensor manifest), then
//! the little-endian tensor payload in manifest order. Manifest offsets are
//! relative to the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ModelConfig, RunConfig, TrainConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Moments, Optimizer};
use crate::tensor::Tensor;
use crate::trainer::{architecture_for, TrainState};

pub const MAGIC: &[u8; 5] = b"MOECL";
pub const VERSION: u8 = 1;
const PREFIX: usize = MAGIC.len() + 1 + 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    /// Lossless; the default.
    #[default]
    F64,
    /// Half the size; values are rounded on save.
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
    vocab: Option<Vocab>,
    phase: usize,
    step: usize,
    trained: Vec<usize>,
    optim_steps: BTreeMap<String, u64>,
    tensors: Vec<ManifestEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub vocab: Option<Vocab>,
    pub phase: usize,
    pub step: usize,
    pub trained: Vec<usize>,
    /// Model parameters, then optimizer moments as `optim.m/<name>` and
    /// `optim.v/<name>`.
    pub tensors: Vec<(String, Tensor)>,
    optim_steps: BTreeMap<String, u64>,
}

fn m_name(p: &str) -> String {
    format!("optim.m/{p}")
}

fn v_name(p: &str) -> String {
    format!("optim.v/{p}")
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, run: &RunConfig, vocab: Option<&Vocab>) -> Self {
        let store = &state.model.store;
        let mut tensors: Vec<(String, Tensor)> = store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        let mut optim_steps = BTreeMap::new();
        for (id, mo) in &state.optimizer.state {
            let name = &store.entry(*id).name;
            tensors.push((m_name(name), mo.m.clone()));
            tensors.push((v_name(name), mo.v.clone()));
            optim_steps.insert(name.clone(), mo.step);
        }
        Self {
            model: state.model.config.clone(),
            train: TrainConfig { method: state.method, ..run.train.clone() },
            data: run.data.clone(),
            vocab: vocab.cloned(),
            phase: state.phase,
            step: state.step,
            trained: state.trained.clone(),
            tensors,
            optim_steps,
        }
    }

    /// Rebuilds the training state. Every model tensor must be present.
    pub fn into_state(self) -> Result<TrainState> {
        let mut model = Model::new(&self.model, architecture_for(self.train.method))?;
        let mut by_name: BTreeMap<String, Tensor> = self.tensors.into_iter().collect();
        let ids: Vec<_> = model.store.ids().collect();
        for id in &ids {
            let name = model.store.entry(*id).name.clone();
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            model.store.set(*id, t)?;
        }
        let mut optimizer = Optimizer::new(self.train.optimizer, self.train.learning_rate);
        for (name, step) in &self.optim_steps {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown tensor {name}")))?;
            let m = by_name.remove(&m_name(name));
            let v = by_name.remove(&v_name(name));
            let (Some(m), Some(v)) = (m, v) else {
                return Err(Error::Format(format!("incomplete optimizer state for {name}")));
            };
            optimizer.state.insert(id, Moments { m, v, step: *step });
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(TrainState {
            model,
            optimizer,
            method: self.train.method,
            phase: self.phase,
            step: self.step,
            trained: self.trained,
            phase_hashes: Vec::new(),
        })
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for v in t.data() {
                match dtype {
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => payload.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype,
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
            vocab: self.vocab.clone(),
            phase: self.phase,
            step: self.step,
            trained: self.trained.clone(),
            optim_steps: self.optim_steps.clone(),
            tensors: manifest,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    /// Validates magic, version and every manifest range before decoding
    /// any tensor.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes.len() < PREFIX {
            return Err(Error::Bounds("file ends inside the prefix".into()));
        }
        let version = bytes[MAGIC.len()];
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let hlen = u32::from_le_bytes(bytes[MAGIC.len() + 1..PREFIX].try_into().expect("4 bytes")) as usize;
        let payload_start = PREFIX
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Bounds(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX..payload_start]).map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut next = 0u64;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.length != (numel * e.dtype.width()) as u64 {
                return Err(Error::Format(format!("tensor {} length does not match its shape", e.name)));
            }
            if e.offset < next {
                return Err(Error::Bounds(format!("tensor {} overlaps its predecessor", e.name)));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| Error::Bounds(format!("tensor {} runs past the end of the payload", e.name)))?;
            next = end;
        }

        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
                let data = match e.dtype {
                    Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                    Dtype::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                };
                Tensor::new(e.shape.clone(), data).map(|t| (e.name.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: header.model,
            train: header.train,
            data: header.data,
            vocab: header.vocab,
            phase: header.phase,
            step: header.step,
            trained: header.trained,
            tensors,
            optim_steps: header.optim_steps,
        })
    }
}

pub fn save_checkpoint(state: &TrainState, run: &RunConfig, vocab: Option<&Vocab>, path: &Path) -> Result<()> {
    save_checkpoint_as(state, run, vocab, path, Dtype::F64)
}

pub fn save_checkpoint_as(state: &TrainState, run: &RunConfig, vocab: Option<&Vocab>, path: &Path, dtype: Dtype) -> Result<()> {
    let bytes = Checkpoint::from_state(state, run, vocab).to_bytes(dtype);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
