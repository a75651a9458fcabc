//! `.i2ew` weight files.
//!
//! Layout: `I2EW` magic, `u32` LE header length, JSON header, raw `f32` LE
//! parameter blocks in header order, then the 32-byte SHA-256 of everything
//! before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor_nn::ParamStore;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"I2EW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub format_version: u32,
    pub config: ModelConfig,
    pub head_round: u64,
    pub params: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    digest_algorithm: String,
    config: ModelConfig,
    head_round: u64,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
    /// Number of `f32` values.
    len: usize,
}

impl ModelWeights {
    pub fn from_store(config: ModelConfig, head_round: u64, store: &ParamStore<f32>) -> Self {
        Self {
            format_version: WEIGHTS_FORMAT_VERSION,
            config,
            head_round,
            params: store
                .iter()
                .map(|p| WeightEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), values: p.tensor.data().to_vec() })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.params.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let manifest = self
            .params
            .iter()
            .map(|e| {
                let m = ManifestEntry { name: e.name.clone(), shape: e.shape.clone(), offset, len: e.values.len() };
                offset += 4 * e.values.len();
                m
            })
            .collect();
        let header = Header {
            format_version: self.format_version,
            digest_algorithm: "sha256".into(),
            config: self.config.clone(),
            head_round: self.head_round,
            params: manifest,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Weights(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + offset + DIGEST_LEN);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.params {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < WEIGHTS_MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Weights(format!("file truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::Weights("bad magic, not a weight file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Weights("digest mismatch, file is corrupt or truncated".into()));
        }
        let header_len = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Weights("header length exceeds file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[8..data_start]).map_err(|e| Error::Weights(format!("bad header: {e}")))?;
        if header.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::Weights(format!("unknown format version {}", header.format_version)));
        }
        if header.digest_algorithm != "sha256" {
            return Err(Error::Weights(format!("unknown digest algorithm {}", header.digest_algorithm)));
        }
        let data = &body[data_start..];
        let mut params = Vec::with_capacity(header.params.len());
        let mut expected_offset = 0;
        for m in header.params {
            let numel: usize = m.shape.iter().product();
            let end = m.offset + 4 * m.len;
            if numel != m.len || m.offset != expected_offset || end > data.len() {
                return Err(Error::Weights(format!("manifest entry {} is inconsistent with the data", m.name)));
            }
            let values = data[m.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            expected_offset = end;
            params.push(WeightEntry { name: m.name, shape: m.shape, values });
        }
        if expected_offset != data.len() {
            return Err(Error::Weights(format!("{} trailing data bytes", data.len() - expected_offset)));
        }
        Ok(Self { format_version: header.format_version, config: header.config, head_round: header.head_round, params })
    }

    /// Hex SHA-256 of the serialized file.
    pub fn content_digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - DIGEST_LEN..]))
    }

    /// Errors unless the echoed config equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Weights(format!(
                "config mismatch: file has {}, expected {}",
                serde_json::to_string(&self.config).unwrap_or_default(),
                serde_json::to_string(expected).unwrap_or_default()
            )));
        }
        Ok(())
    }
}

/// Every name or shape difference between `store` and `w`.
pub(crate) fn layout_mismatches(store: &ParamStore<f32>, w: &ModelWeights) -> Vec<String> {
    let mut problems = Vec::new();
    for p in store.iter() {
        match w.get(&p.name) {
            None => problems.push(format!("{} missing from source", p.name)),
            Some(e) if e.shape != p.tensor.shape() => {
                problems.push(format!("{} has shape {:?} in source, {:?} in target", p.name, e.shape, p.tensor.shape()))
            }
            Some(_) => {}
        }
    }
    for e in &w.params {
        if store.id(&e.name).is_none() {
            problems.push(format!("{} not present in target", e.name));
        }
    }
    problems
}

pub fn save_weights(path: &Path, w: &ModelWeights) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, w.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_bytes(&bytes)
}
