//! Single-file checkpoints: magic, JSON header (config and tensor manifest),
//! raw little-endian tensor data, and a trailing SHA-256 of header and data.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::EncoderConfig;
use crate::error::{EncoderError, Result};
use crate::params::EncoderParams;

const MAGIC: &[u8; 8] = b"CHRCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    vocab_size: usize,
    dtype: DType,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(p: &EncoderParams, dtype: DType) -> Result<Vec<u8>> {
    let header = Header {
        config: p.config.clone(),
        vocab_size: p.vocab_size,
        dtype,
        tensors: p
            .meta
            .iter()
            .map(|m| TensorEntry {
                name: m.name.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut body = Vec::new();
    body.write_u64::<LE>(json.len() as u64)?;
    body.extend_from_slice(&json);
    for t in &p.tensors {
        for &v in t.iter() {
            match dtype {
                DType::F64 => body.write_f64::<LE>(v)?,
                DType::F32 => body.write_f32::<LE>(v as f32)?,
            }
        }
    }
    let mut out = Vec::with_capacity(body.len() + 44);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION)?;
    out.extend_from_slice(&body);
    out.extend_from_slice(&Sha256::digest(&body));
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let bad = |m: &str| EncoderError::Checkpoint(m.to_string());
    if bytes.len() < 12 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (body, digest) = bytes[12..].split_at(bytes.len() - 12 - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("content hash mismatch"));
    }
    let mut r = Cursor::new(body);
    let n = r.read_u64::<LE>()? as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let mut data = Vec::with_capacity(t.rows * t.cols);
        for _ in 0..t.rows * t.cols {
            data.push(match header.dtype {
                DType::F64 => r.read_f64::<LE>()?,
                DType::F32 => r.read_f32::<LE>()? as f64,
            });
        }
        tensors.push(Array2::from_shape_vec((t.rows, t.cols), data).map_err(|e| bad(&e.to_string()))?);
    }
    EncoderParams::from_tensors(&header.config, header.vocab_size, tensors)
}

pub fn save(path: impl AsRef<Path>, p: &EncoderParams) -> Result<()> {
    fs::write(path, to_bytes(p, DType::F64)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<EncoderParams> {
    from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the checkpoint bytes.
pub fn content_hash(p: &EncoderParams) -> Result<String> {
    let d = Sha256::digest(to_bytes(p, DType::F64)?);
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}
