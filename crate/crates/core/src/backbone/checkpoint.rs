//! Checkpoint container.
//!
//! Layout: magic `TESRCKPT`, format version (u32 LE), header length (u64 LE),
//! a JSON header with config, vocabulary, dtype and tensor table, then every
//! tensor's elements little-endian in table order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReferenceTransformer, ReferenceTransformerConfig, Tokenizer};
use crate::autograd::ParamStore;
use crate::backbone::EncoderBackbone;
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

const MAGIC: &[u8; 8] = b"TESRCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ReferenceTransformerConfig,
    vocab: Tokenizer,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn write_checkpoint<T: Scalar>(
    w: &mut impl Write,
    model: &ReferenceTransformer<T>,
) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: model.config().clone(),
        vocab: model.tokenizer().clone(),
        tensors: model
            .params()
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(header.len() + model.params().num_scalars() * T::BYTES + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, m) in model.params().iter() {
        for v in m.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<ReferenceTransformer<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing TESRCKPT magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut offset = 20 + hlen;
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let end = offset + n * T::BYTES;
        let raw = bytes.get(offset..end).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        params.add(t.name.clone(), Mat::from_vec(t.rows, t.cols, data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    ReferenceTransformer::from_parts(header.config, header.vocab, params)
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &ReferenceTransformer<T>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ReferenceTransformer<T>> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
