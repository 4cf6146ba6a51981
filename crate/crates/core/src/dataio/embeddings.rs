//! `EMB1` binary embedding files.
//!
//! Layout: magic `EMB1`, u32 row count, u32 width, the row ids as
//! NUL-terminated UTF-8, then `rows × width` little-endian f32 values in
//! row-major order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != ids.len() * dim {
            return Err(Error::SizeMismatch(format!(
                "{} ids x {dim} columns needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim.max(1),
                col: pos % dim.max(1),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.contains('\0') {
                return Err(Error::Data(format!("embedding id {id:?} contains NUL")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate embedding id {id:?}")));
            }
        }
        Ok(Self {
            ids,
            dim,
            values,
            index,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }
}

pub fn save_embeddings(path: impl AsRef<Path>, matrix: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(matrix)).map_err(|e| Error::io(path, e))
}

pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + matrix.values.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    for id in &matrix.ids {
        buf.extend_from_slice(id.as_bytes());
        buf.push(0);
    }
    for v in &matrix.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 12 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::BadMagic { expected: "EMB1" });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let mut pos = 12;
    let mut ids = Vec::with_capacity(n.min(bytes.len()));
    for i in 0..n {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| Error::SizeMismatch(format!("id {i} of {n} is not terminated")))?;
        let id = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|e| Error::Data(format!("embedding id {i} is not UTF-8: {e}")))?;
        ids.push(id.to_string());
        pos += end + 1;
    }
    let expected = n * dim * 4;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::SizeMismatch(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    EmbeddingMatrix::new(ids, dim, values)
}
