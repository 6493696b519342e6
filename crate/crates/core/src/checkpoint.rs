//! Checkpoint container: `"VADC"`, a little-endian `u32` version, a `u64`
//! manifest length, the JSON manifest, then raw little-endian tensor data.
//! Parameters are stored as `f32`, optimizer moments as `f64`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelVocabulary};
use crate::error::{Error, Result};
use crate::model::{ClassSource, VadClip};
use crate::train::{AdamW, EpochLog, RunConfig, Trainer};

pub const MAGIC: [u8; 4] = *b"VADC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub vocab: LabelVocabulary,
    pub dim: usize,
    pub epoch: usize,
    pub optimizer_step: Option<u64>,
    /// Seed of the frozen text encoder the class embeddings come from.
    pub encoder_seed: Option<u64>,
    pub history: Vec<EpochLog>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Restored {
    pub config: RunConfig,
    pub model: VadClip,
    pub epoch: usize,
    pub optimizer: Option<AdamW>,
    pub history: Vec<EpochLog>,
}

impl Restored {
    /// Resumes training where the checkpoint left off.
    pub fn into_trainer(self, train: &Dataset) -> Result<Trainer> {
        let mut t = Trainer::with_model(self.config, self.model, train)?;
        if let Some(opt) = self.optimizer {
            t.optimizer = opt;
        }
        t.epoch = self.epoch;
        t.history = self.history;
        Ok(t)
    }
}

struct Payload {
    tensors: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl Payload {
    fn push(&mut self, name: String, dtype: Dtype, a: &Array2<f64>) {
        let offset = self.bytes.len();
        for &v in a.iter() {
            match dtype {
                Dtype::F32 => self.bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => self.bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
        self.tensors.push(TensorEntry {
            name,
            dtype,
            shape: [a.nrows(), a.ncols()],
            offset,
        });
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(
    config: &RunConfig,
    model: &VadClip,
    epoch: usize,
    optimizer: Option<&AdamW>,
    history: &[EpochLog],
) -> Result<Vec<u8>> {
    let mut payload = Payload {
        tensors: Vec::new(),
        bytes: Vec::new(),
    };
    for (_, p) in model.store.iter() {
        payload.push(format!("param/{}", p.name), Dtype::F32, &p.value);
    }
    if let Some(opt) = optimizer {
        for ((_, p), (m, v)) in model.store.iter().zip(opt.m.iter().zip(&opt.v)) {
            payload.push(format!("adam_m/{}", p.name), Dtype::F64, m);
            payload.push(format!("adam_v/{}", p.name), Dtype::F64, v);
        }
    }
    if let ClassSource::Precomputed(t) = model.classes() {
        payload.push("class_embeddings".into(), Dtype::F64, t);
    }
    let manifest = Manifest {
        config: config.clone(),
        vocab: model.vocab().clone(),
        dim: model.dim(),
        epoch,
        optimizer_step: optimizer.map(|o| o.step),
        encoder_seed: model.text_encoder().and_then(|e| e.seed()),
        history: history.to_vec(),
        tensors: payload.tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.bytes.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

fn read_tensor(entry: &TensorEntry, data: &[u8]) -> Result<Array2<f64>> {
    let [r, c] = entry.shape;
    let width = match entry.dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let len = r * c * width;
    let bytes = data
        .get(entry.offset..entry.offset + len)
        .ok_or(Error::Truncated {
            expected: entry.offset + len,
            found: data.len(),
        })?;
    let values: Vec<f64> = bytes
        .chunks_exact(width)
        .map(|b| match entry.dtype {
            Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        })
        .collect();
    Array2::from_shape_vec((r, c), values).map_err(|e| bad(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<Restored> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + json_len).ok_or(Error::Truncated {
        expected: 16 + json_len,
        found: bytes.len(),
    })?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Serde(e.to_string()))?;
    let data = &bytes[16 + json_len..];
    let tensor = |name: &str| -> Result<Option<Array2<f64>>> {
        manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| read_tensor(t, data))
            .transpose()
    };

    let model_cfg = manifest.config.model.clone();
    let mut model = match tensor("class_embeddings")? {
        Some(t) => VadClip::with_class_embeddings(model_cfg, manifest.vocab.clone(), manifest.dim, t)?,
        None => {
            if manifest.encoder_seed != Some(model_cfg.text.encoder.seed) {
                return Err(bad("text encoder seed does not match the configuration"));
            }
            let mut cfg = model_cfg;
            cfg.text.class_embeddings_file = None;
            VadClip::new(cfg, manifest.vocab.clone(), manifest.dim)?
        }
    };

    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    for (p, name) in model.store.iter_mut().zip(&names) {
        let t = tensor(&format!("param/{name}"))?.ok_or_else(|| bad(format!("missing parameter {name}")))?;
        if t.dim() != p.value.dim() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: stored {:?}, model {:?}",
                t.dim(),
                p.value.dim()
            )));
        }
        p.value = t;
    }
    let optimizer = match manifest.optimizer_step {
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in &names {
                m.push(tensor(&format!("adam_m/{name}"))?.ok_or_else(|| bad(format!("missing moment for {name}")))?);
                v.push(tensor(&format!("adam_v/{name}"))?.ok_or_else(|| bad(format!("missing moment for {name}")))?);
            }
            Some(AdamW { step, m, v })
        }
        None => None,
    };
    Ok(Restored {
        config: manifest.config,
        model,
        epoch: manifest.epoch,
        optimizer,
        history: manifest.history,
    })
}

pub fn save_trainer(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    let bytes = encode(
        &trainer.config,
        &trainer.model,
        trainer.epoch,
        Some(&trainer.optimizer),
        &trainer.history,
    )?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Restored> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
