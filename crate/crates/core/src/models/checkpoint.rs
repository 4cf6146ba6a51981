//! Checkpoint file: `ENFC`, u32 format version, u64 manifest length, JSON
//! manifest, little-endian f64 tensor payloads, then a CRC32 of everything
//! before it. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, HeadKind, ModelCheckpoint, TrainConfig, TrainingMeta};
use crate::diffgraph::{ParamStore, Tensor};
use crate::encoding::Encoder;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ENFC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    head: HeadKind,
    backbone: BackboneConfig,
    encoder: Encoder,
    train_config: TrainConfig,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0;
    for (name, t) in ckpt.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let manifest = Manifest {
        head: ckpt.head,
        backbone: ckpt.backbone.clone(),
        encoder: ckpt.encoder.clone(),
        train_config: ckpt.train_config.clone(),
        meta: ckpt.meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + json.len() + offset * 8 + 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in ckpt.params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn verify_crc(bytes: &[u8]) -> Result<()> {
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "ENFC" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::SizeMismatch("checkpoint header is truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let manifest_end = usize::try_from(mlen)
        .ok()
        .and_then(|m| m.checked_add(HEADER_LEN))
        .filter(|&end| end.checked_add(4).is_some_and(|e| e <= bytes.len()))
        .ok_or_else(|| Error::SizeMismatch(format!("checkpoint truncated inside its {mlen}-byte manifest")))?;
    let manifest: Manifest = match serde_json::from_slice(&bytes[HEADER_LEN..manifest_end]) {
        Ok(m) => m,
        Err(e) => {
            verify_crc(bytes)?;
            return Err(e.into());
        }
    };
    let elements: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let expected = manifest_end + elements * 8 + 4;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch(format!(
            "checkpoint has {} bytes, its manifest implies {expected}",
            bytes.len()
        )));
    }
    verify_crc(bytes)?;

    let payload = &bytes[manifest_end..manifest_end + elements * 8];
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        let len: usize = entry.shape.iter().product();
        if entry.offset + len > elements {
            return Err(Error::SizeMismatch(format!("tensor {} extends past the payload", entry.name)));
        }
        let data = payload[entry.offset * 8..(entry.offset + len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let ckpt = ModelCheckpoint {
        head: manifest.head,
        backbone: manifest.backbone,
        encoder: manifest.encoder,
        params,
        train_config: manifest.train_config,
        meta: manifest.meta,
    };
    check_complete(&ckpt)?;
    Ok(ckpt)
}

/// Every parameter the declared architecture needs is present with the
/// right shape.
fn check_complete(ckpt: &ModelCheckpoint) -> Result<()> {
    let mut rng = crate::randdist::RngState::new(0);
    let reference = super::init_params(&ckpt.backbone, ckpt.head, &mut rng)?;
    for (name, t) in reference.iter() {
        match ckpt.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Data(format!("checkpoint is missing tensor {name}"))),
        }
    }
    if ckpt.params.len() != reference.len() {
        return Err(Error::Data("checkpoint has unexpected extra tensors".into()));
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &ModelCheckpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
