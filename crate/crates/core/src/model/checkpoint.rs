//! Checkpoint container: magic, version, a JSON header describing the
//! model and tensor layout, then raw little-endian `f32` data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureVariant, Model, ModelConfig, ModelError, Result};
use crate::substrate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ABACUSCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    /// Stand-in that answers every prompt with the exact answer.
    Oracle,
}

/// AdamW moments, one pair of buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: Option<Model>,
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: CheckpointKind,
    step: u64,
    config: Option<ModelConfig>,
    variant: Option<ArchitectureVariant>,
    tensors: Vec<TensorEntry>,
    optimizer_t: Option<u64>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn of_model(model: Model, step: u64) -> Self {
        Self {
            kind: CheckpointKind::Model,
            model: Some(model),
            step,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn oracle() -> Self {
        Self {
            kind: CheckpointKind::Oracle,
            model: None,
            step: 0,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let model = self.model.as_ref();
        let header = Header {
            kind: self.kind,
            step: self.step,
            config: model.map(|m| m.config.clone()),
            variant: model.map(|m| m.variant),
            tensors: model
                .map(|m| {
                    m.names()
                        .iter()
                        .zip(m.params())
                        .map(|(n, t)| TensorEntry {
                            name: n.clone(),
                            shape: t.shape().to_vec(),
                        })
                        .collect()
                })
                .unwrap_or_default(),
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut put = |data: &[f32]| -> std::io::Result<()> {
            let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
            w.write_all(&bytes)
        };
        if let Some(m) = model {
            for t in m.params() {
                put(t.data())?;
            }
        }
        if let Some(o) = &self.optimizer {
            for buf in o.m.iter().chain(&o.v) {
                put(buf)?;
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;

        let mut take = |n: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated tensor data"))?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let mut named = Vec::with_capacity(sizes.len());
        for (entry, &n) in header.tensors.iter().zip(&sizes) {
            named.push((entry.name.clone(), Tensor::new(entry.shape.clone(), take(n)?)?));
        }
        let optimizer = match header.optimizer_t {
            Some(t) => {
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { t, m, v })
            }
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let model = match (header.kind, header.config, header.variant) {
            (CheckpointKind::Model, Some(c), Some(v)) => Some(Model::from_parts(c, v, named)?),
            (CheckpointKind::Model, _, _) => return Err(bad("model checkpoint without config")),
            (CheckpointKind::Oracle, _, _) => None,
        };
        Ok(Self {
            kind: header.kind,
            model,
            step: header.step,
            optimizer,
            meta: header.meta,
        })
    }

    /// Writes via a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
