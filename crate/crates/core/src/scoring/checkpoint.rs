//! Binary checkpoint container.
//!
//! Layout: `AESCKPT\0` magic, u32 format version, u64 header length, a JSON
//! header (model config, vocabulary, head layout, prompt-table hash and a
//! tensor directory of names and lengths), the tensors as little-endian f64
//! in directory order, and a trailing SHA-256 over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HeadBank, HeadKeying, HeadLayout, ModelConfig, ModelState, ScoringError};
use crate::corpus::PromptTable;
use crate::encoder::{Encoder, Parameters};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"AESCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    head_keying: HeadKeying,
    head_layout: HeadLayout,
    prompt_table_hash: String,
    trained: bool,
    tensors: Vec<TensorEntry>,
}

pub fn write_model(model: &ModelState) -> Vec<u8> {
    let tensors = model.tensors();
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        head_keying: model.heads.keying,
        head_layout: model.heads.layout(),
        prompt_table_hash: model.prompt_table_hash.clone(),
        trained: model.trained,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("checkpoint header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in &tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses a checkpoint and checks it against the active prompt table.
pub fn read_model(bytes: &[u8], table: &PromptTable) -> Result<ModelState, ScoringError> {
    let corrupt = |m: &str| ScoringError::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 + 8 + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(ScoringError::VersionMismatch(format!(
            "format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])
        .map_err(|e| ScoringError::CorruptCheckpoint(format!("header: {e}")))?;

    let expected_hash = table.content_hash();
    if header.prompt_table_hash != expected_hash {
        return Err(ScoringError::VersionMismatch(format!(
            "checkpoint was trained against prompt table {}, active table is {}",
            header.prompt_table_hash, expected_hash
        )));
    }

    let mut vocab = header.vocab;
    vocab.reindex();
    let encoder = Encoder::new(header.config.encoder_config(vocab.len()))
        .map_err(|e| ScoringError::CorruptCheckpoint(format!("config: {e}")))?;
    let heads = HeadBank::from_layout(header.head_keying, &header.head_layout, header.config.d_model);
    let mut model = ModelState {
        config: header.config,
        vocab,
        encoder,
        heads,
        prompt_table_hash: header.prompt_table_hash,
        trained: header.trained,
    };

    let mut data = &body[header_end..];
    {
        let slots = model.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(corrupt("tensor count does not match the model shape"));
        }
        for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || slot.len() != entry.len {
                return Err(ScoringError::CorruptCheckpoint(format!(
                    "tensor {} (len {}) does not match expected {} (len {})",
                    entry.name,
                    entry.len,
                    name,
                    slot.len()
                )));
            }
            let nbytes = entry.len * 8;
            if data.len() < nbytes {
                return Err(corrupt("tensor data truncated"));
            }
            for (v, chunk) in slot.iter_mut().zip(data[..nbytes].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[nbytes..];
        }
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok(model)
}

pub fn save_model(model: &ModelState, path: &Path) -> Result<String, ScoringError> {
    let bytes = write_model(model);
    std::fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_model(path: &Path, table: &PromptTable) -> Result<ModelState, ScoringError> {
    load_model_with_hash(path, table).map(|(m, _)| m)
}

/// Loads a checkpoint and returns it with the SHA-256 of the file bytes.
pub fn load_model_with_hash(path: &Path, table: &PromptTable) -> Result<(ModelState, String), ScoringError> {
    let bytes = std::fs::read(path)?;
    let model = read_model(&bytes, table)?;
    Ok((model, hex::encode(Sha256::digest(&bytes))))
}

/// SHA-256 of a checkpoint file.
pub fn checkpoint_hash(path: &Path) -> Result<String, ScoringError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
