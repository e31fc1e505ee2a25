//! Binary model checkpoints.
//!
//! Layout: the magic `PMTLCKPT`, a little-endian `u64` header length, a JSON
//! header, then every parameter's values as little-endian `f64` in
//! [`Parameters::tensors`] order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SpeakerTable;
use crate::model::{Model, ModelConfig};
use crate::tensor::Parameters;

pub const MAGIC: &[u8; 8] = b"PMTLCKPT";
pub const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("unsupported checkpoint format {0}")]
    Format(u32),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, vocab {vocab}")]
    VocabMismatch { checkpoint: String, vocab: String },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub speakers: Vec<String>,
    pub has_autoencoder: bool,
    pub tensors: Vec<TensorMeta>,
}

pub fn to_bytes(model: &Model, vocab_hash: &str) -> Vec<u8> {
    let params = model.tensors();
    let header = Header {
        format: FORMAT,
        config: model.config(),
        vocab_hash: vocab_hash.to_string(),
        speakers: model.speakers.names().to_vec(),
        has_autoencoder: model.ae_encoder.is_some(),
        tensors: params.iter().map(|p| TensorMeta { name: p.name.clone(), shape: p.tensor.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n_values: usize = params.iter().map(|p| p.tensor.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &params {
        for v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint. With `vocab_hash`, rejects a checkpoint written for
/// another vocabulary.
pub fn from_bytes(bytes: &[u8], vocab_hash: Option<&str>) -> Result<(Model, Header)> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or(CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(body).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != FORMAT {
        return Err(CheckpointError::Format(header.format));
    }
    if let Some(expected) = vocab_hash {
        if expected != header.vocab_hash {
            return Err(CheckpointError::VocabMismatch { checkpoint: header.vocab_hash.clone(), vocab: expected.to_string() });
        }
    }
    if header.speakers.len() != header.config.speakers {
        return Err(CheckpointError::Header("speaker names do not match the speaker table".into()));
    }
    let mut model = Model::zeros(header.config, header.has_autoencoder);
    model.speakers = SpeakerTable::new(header.speakers.clone());
    let layout: Vec<TensorMeta> =
        model.tensors().iter().map(|p| TensorMeta { name: p.name.clone(), shape: p.tensor.shape().to_vec() }).collect();
    if layout != header.tensors {
        return Err(CheckpointError::Header("tensor layout does not match the model config".into()));
    }
    let mut data = &bytes[16 + hlen..];
    for t in model.tensors_mut() {
        let n = t.len() * 8;
        if data.len() < n {
            return Err(CheckpointError::Truncated);
        }
        for (v, chunk) in t.values_mut().iter_mut().zip(data[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", data.len())));
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, vocab_hash: &str) -> Result<()> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&to_bytes(model, vocab_hash)).map_err(io)
}

pub fn load(path: &Path, vocab_hash: Option<&str>) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes, vocab_hash).map(|(m, _)| m)
}
