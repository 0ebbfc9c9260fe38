use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::transformer::{ControlTransformer, MOMENTUM, OBS_TOK};
use crate::error::{CtError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CTCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
    AdaptActionSpace,
}

/// One step in a checkpoint's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub dataset_hashes: Vec<String>,
    #[serde(default)]
    pub note: String,
}

/// A model plus its training history. History only grows.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ControlTransformer,
    provenance: Vec<ProvenanceEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    provenance: Vec<ProvenanceEntry>,
    tensors: Vec<TensorIndex>,
}

impl Checkpoint {
    pub fn new(model: ControlTransformer) -> Self {
        Self {
            model,
            provenance: Vec::new(),
        }
    }

    pub fn provenance(&self) -> &[ProvenanceEntry] {
        &self.provenance
    }

    pub fn record(&mut self, entry: ProvenanceEntry) {
        self.provenance.push(entry);
    }

    /// Every task that appeared in any training stage.
    pub fn trained_tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .provenance
            .iter()
            .flat_map(|e| e.tasks.iter().cloned())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Content hash of every parameter, used as the checkpoint id.
    pub fn id(&self) -> Result<String> {
        Ok(self.model.params().hash_where(|_| true)?[..16].to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let params = self.model.params();
        for name in params.names().filter(|n| n.starts_with(OBS_TOK)) {
            let live = params.get(name)?.dims().to_vec();
            let shadow = params.get(&format!("{MOMENTUM}{name}"))?.dims().to_vec();
            if live != shadow {
                return Err(CtError::Integrity(format!(
                    "momentum copy of `{name}` has shape {shadow:?}, live {live:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::with_capacity(params.len());
        for (name, var) in params.iter() {
            let vals = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?;
            tensors.push(TensorIndex {
                name: name.to_string(),
                shape: var.dims().to_vec(),
                offset: blob.len(),
                numel: vals.len(),
            });
            for v in vals {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config().clone(),
            provenance: self.provenance.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], dtype: DType) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(CtError::Integrity("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(CtError::FormatVersion {
                found: version,
                supported: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(CtError::Integrity("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != version {
            return Err(CtError::Integrity("header and archive versions disagree".into()));
        }
        let blob = &body[hlen..];
        let mut params = ParamStore::new(dtype, candle_core::Device::Cpu);
        let mut expected = 0usize;
        for t in &header.tensors {
            if t.shape.iter().product::<usize>() != t.numel || t.offset != expected {
                return Err(CtError::Integrity(format!("bad index entry for `{}`", t.name)));
            }
            let end = t.offset + 4 * t.numel;
            let raw = blob
                .get(t.offset..end)
                .ok_or_else(|| CtError::Integrity(format!("tensor `{}` runs past the archive", t.name)))?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.insert_values(&t.name, &t.shape, vals)?;
            expected = end;
        }
        if expected != blob.len() {
            return Err(CtError::Integrity("trailing bytes after last tensor".into()));
        }
        let ck = Self {
            model: ControlTransformer::from_parts(header.config, params)?,
            provenance: header.provenance,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CtError::storage(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| CtError::storage(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CtError::storage(path, e))?;
        Self::from_bytes(&bytes, DType::F32)
    }
}
