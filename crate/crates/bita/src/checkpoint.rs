//! Binary checkpoints of the trainable parameters and optimizer moments.
//!
//! Layout: `BITA`, format version (u32 LE), header length (u32 LE), a JSON
//! header, the concatenated little-endian f32 tensors in header order, and a
//! CRC32 (u32 LE) of every preceding byte. The frozen encoder and language
//! model are not stored; they are rebuilt from `frozen_seed` in the model
//! config recorded in the header.

use std::fs;
use std::path::Path;

use bita_core::model::{BitaModel, ModelConfig};
use bita_core::textproc::Vocabulary;
use bita_core::train::{OptimState, Stage};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, BitaError, Result};

pub const MAGIC: &[u8; 4] = b"BITA";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: String,
    optim_step: u64,
    model: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub optim_step: u64,
    pub model: ModelConfig,
    /// Full token list, reserved tokens first.
    pub vocab: Vec<String>,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

fn entry(name: String, shape: &[usize]) -> TensorEntry {
    TensorEntry {
        name,
        shape: shape.to_vec(),
        dtype: "f32".into(),
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Checkpoint {
    /// Snapshot of every trainable parameter and any optimizer moments.
    pub fn capture(model: &BitaModel, optim: &OptimState, stage: Stage, vocab: &Vocabulary) -> Self {
        let store = model.params();
        let mut tensors = Vec::new();
        let trainable: Vec<_> = store.ids().filter(|&id| !store.group(id).is_frozen()).collect();
        for &id in &trainable {
            let t = store.get(id);
            tensors.push((entry(store.name(id).to_string(), t.shape()), to_f32(t.data())));
        }
        for &id in &trainable {
            let i = id.index();
            if optim.m.get(i).is_some_and(|m| !m.is_empty()) {
                let shape = store.get(id).shape();
                let name = store.name(id);
                tensors.push((entry(format!("{ADAM_M}{name}"), shape), to_f32(&optim.m[i])));
                tensors.push((entry(format!("{ADAM_V}{name}"), shape), to_f32(&optim.v[i])));
            }
        }
        Self {
            stage,
            optim_step: optim.step,
            model: model.config().clone(),
            vocab: vocab.tokens().to_vec(),
            tensors,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::from_tokens(self.vocab.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            stage: self.stage.tag().to_string(),
            optim_step: self.optim_step,
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("headers always serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| BitaError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing BITA magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(BitaError::Crc { stored, computed });
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(BitaError::Version(version));
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let payload_start = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header runs past the end of the file"))?;
        let header: Header = serde_json::from_slice(&body[12..payload_start])
            .map_err(|e| BitaError::Checkpoint(format!("bad header: {e}")))?;
        let stage = Stage::from_tag(&header.stage)
            .ok_or_else(|| BitaError::Checkpoint(format!("unknown stage tag {:?}", header.stage)))?;
        let mut payload = &body[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(BitaError::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if payload.len() < n * 4 {
                return Err(BitaError::Checkpoint(format!("payload too short for {}", e.name)));
            }
            let (head, rest) = payload.split_at(n * 4);
            let data = head
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((e, data));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self {
            stage,
            optim_step: header.optim_step,
            model: header.model,
            vocab: header.vocab,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    fn find(&self, name: &str) -> Option<&(TensorEntry, Vec<f32>)> {
        self.tensors.iter().find(|(e, _)| e.name == name)
    }

    /// Copies the stored parameters into `model`, checking every trainable
    /// tensor by name and shape. With `optim`, also restores the moments and
    /// step counter.
    pub fn restore(&self, model: &mut BitaModel, optim: Option<&mut OptimState>) -> Result<()> {
        let store = model.params();
        for (e, _) in &self.tensors {
            let base = e
                .name
                .strip_prefix(ADAM_M)
                .or_else(|| e.name.strip_prefix(ADAM_V))
                .unwrap_or(&e.name);
            match store.find(base) {
                Some(id) if !store.group(id).is_frozen() => {
                    let expected = store.get(id).shape();
                    if expected != e.shape.as_slice() {
                        return Err(BitaError::ShapeMismatch {
                            name: e.name.clone(),
                            stored: e.shape.clone(),
                            expected: expected.to_vec(),
                        });
                    }
                }
                _ => return Err(BitaError::UnknownTensor(e.name.clone())),
            }
        }
        let ids: Vec<_> = store.ids().filter(|&id| !store.group(id).is_frozen()).collect();
        for &id in &ids {
            let name = store.name(id).to_string();
            if self.find(&name).is_none() {
                return Err(BitaError::MissingTensor(name));
            }
        }
        let mut fresh = optim.is_some().then(|| OptimState::new(model.params()));
        for id in ids {
            let name = model.params().name(id).to_string();
            let (_, data) = self.find(&name).expect("checked above");
            for (dst, &src) in model.params_mut().get_mut(id).data_mut().iter_mut().zip(data) {
                *dst = src as f64;
            }
            if let Some(st) = fresh.as_mut() {
                let m = self.find(&format!("{ADAM_M}{name}"));
                let v = self.find(&format!("{ADAM_V}{name}"));
                match (m, v) {
                    (Some((_, m)), Some((_, v))) => {
                        st.m[id.index()] = m.iter().map(|&x| x as f64).collect();
                        st.v[id.index()] = v.iter().map(|&x| x as f64).collect();
                    }
                    (None, None) => {}
                    _ => return Err(BitaError::MissingTensor(format!("{ADAM_M}{name} / {ADAM_V}{name}"))),
                }
            }
        }
        if let (Some(dst), Some(mut st)) = (optim, fresh) {
            st.step = self.optim_step;
            *dst = st;
        }
        Ok(())
    }

    /// Model and optimizer state rebuilt from the recorded config.
    pub fn build(&self) -> Result<(BitaModel, OptimState)> {
        let mut model = BitaModel::new(self.model.clone())?;
        let mut optim = OptimState::new(model.params());
        self.restore(&mut model, Some(&mut optim))?;
        Ok((model, optim))
    }
}
