//! Checkpoint container.
//!
//! ```text
//! b"PCLS" | u32 version | u64 header length | JSON header | f32 payload
//! ```
//!
//! All integers and floats are little-endian. The header lists every
//! tensor with its shape and its element offset into the payload.
//! Encoder tensors come first, then head tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{HeadConfig, HeadParams};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PCLS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub encoder: EncoderConfig,
    pub head: Option<HeadConfig>,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn encode_file(header_base: Header, stores: &[&ParamStore]) -> Result<Vec<u8>> {
    let mut header = header_base;
    let mut payload = Vec::new();
    let mut offset = 0;
    for store in stores {
        for (name, t) in store.iter() {
            header.tensors.push(TensorEntry {
                name: name.to_string(),
                shape: [t.rows(), t.cols()],
                offset,
                len: t.len(),
            });
            offset += t.len();
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode_file(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing PCLS magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.shape[0] * e.shape[1] != e.len {
            return Err(Error::Checkpoint(format!("tensor {} shape/len mismatch", e.name)));
        }
        let raw = payload
            .get(e.offset * 4..(e.offset + e.len) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data)));
    }
    Ok((header, tensors))
}

pub fn save_model(path: &Path, model: &Model, metadata: serde_json::Value) -> Result<()> {
    let header = Header {
        encoder: model.encoder.config().clone(),
        head: Some(model.head.config().clone()),
        metadata,
        tensors: Vec::new(),
    };
    fs::write(path, encode_file(header, &[model.encoder.store(), model.head.store()])?)?;
    Ok(())
}

pub fn save_encoder(path: &Path, encoder: &EncoderParams, metadata: serde_json::Value) -> Result<()> {
    let header = Header {
        encoder: encoder.config().clone(),
        head: None,
        metadata,
        tensors: Vec::new(),
    };
    fs::write(path, encode_file(header, &[encoder.store()])?)?;
    Ok(())
}

fn split_stores(tensors: Vec<(String, Tensor)>) -> (ParamStore, ParamStore) {
    let (mut enc, mut head) = (ParamStore::new(), ParamStore::new());
    for (name, t) in tensors {
        if name.starts_with("head.") {
            head.add(name, t);
        } else {
            enc.add(name, t);
        }
    }
    (enc, head)
}

/// Loads a checkpoint that may or may not carry a head.
pub fn load(path: &Path) -> Result<(EncoderParams, Option<HeadParams>, serde_json::Value)> {
    let (header, tensors) = decode_file(&fs::read(path)?)?;
    let (enc, head) = split_stores(tensors);
    let encoder = EncoderParams::from_store(header.encoder, enc)?;
    let head = match header.head {
        Some(cfg) => Some(HeadParams::from_store(cfg, head)?),
        None if head.is_empty() => None,
        None => return Err(Error::Checkpoint("head tensors without a head config".into())),
    };
    Ok((encoder, head, header.metadata))
}

pub fn load_model(path: &Path) -> Result<(Model, serde_json::Value)> {
    match load(path)? {
        (encoder, Some(head), meta) => Ok((Model { encoder, head }, meta)),
        _ => Err(Error::Checkpoint(format!(
            "{} holds an encoder only",
            path.display()
        ))),
    }
}

pub fn read_header(path: &Path) -> Result<Header> {
    Ok(decode_file(&fs::read(path)?)?.0)
}
