//! Checkpoint container: `UG15`, a little-endian u32 version, a u64 manifest
//! length, the JSON manifest, then raw little-endian f32 tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unigrid_numerics::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"UG15";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the data section that follows the manifest.
    pub byte_offset: u64,
    pub byte_len: u64,
}

/// One completed stage in a checkpoint's history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub steps: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub provenance: Vec<StageRecord>,
    /// Seed for whatever runs next from this checkpoint.
    pub rng_state: u64,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub provenance: Vec<StageRecord>,
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn last_stage(&self) -> Option<&str> {
        self.provenance.last().map(|r| r.stage.as_str())
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::with_capacity(ckpt.model.params.numel() * 4);
    for (_, name, t) in ckpt.model.params.iter() {
        let start = data.len() as u64;
        for x in t.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: start,
            byte_len: data.len() as u64 - start,
        });
    }
    let manifest = Manifest {
        config: ckpt.model.config.clone(),
        tensors,
        provenance: ckpt.provenance.clone(),
        rng_state: ckpt.rng_state,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn format<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Parses and validates the whole file before building anything.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER {
        return format(format!("file of {} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return format("bad magic");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return format(format!("version {version}, expected {VERSION}"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let data_start = (HEADER as u64).checked_add(mlen).filter(|&e| e <= bytes.len() as u64);
    let Some(data_start) = data_start else {
        return format("manifest extends past the end of the file");
    };
    let data_start = data_start as usize;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER..data_start]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let data = &bytes[data_start..];
    let mut expected_offset = 0u64;
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        if t.dtype != "f32" || t.byte_len != numel as u64 * 4 || t.byte_offset != expected_offset {
            return format(format!("tensor {} has an inconsistent entry", t.name));
        }
        let end = t.byte_offset + t.byte_len;
        if end > data.len() as u64 {
            return format(format!("tensor {} is truncated", t.name));
        }
        let raw = &data[t.byte_offset as usize..end as usize];
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), values)?);
        expected_offset = end;
    }
    if expected_offset != data.len() as u64 {
        return format(format!("{} trailing bytes", data.len() as u64 - expected_offset));
    }
    let model = Model::from_params(manifest.config, params)?;
    Ok(Checkpoint { model, provenance: manifest.provenance, rng_state: manifest.rng_state })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = to_bytes(ckpt)?;
    fs::write(path, &bytes)?;
    Ok(hash_bytes(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a checkpoint, as it would be written to disk.
pub fn checkpoint_hash(ckpt: &Checkpoint) -> Result<String> {
    Ok(hash_bytes(&to_bytes(ckpt)?))
}

/// Checksum of a parameter subset (for provenance audits).
pub fn params_hash(params: &ParamStore<f32>, names: &[&str]) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in params.iter() {
        if names.is_empty() || names.contains(&name) {
            h.update(name.as_bytes());
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
