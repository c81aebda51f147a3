//! Binary checkpoint container (little-endian).
//!
//! Layout: magic `FRCK`, u32 version, u64 config-JSON length + bytes,
//! u32 tensor count, tensor records, u32 optimizer record count, optimizer
//! records, 32-byte RNG state. Each record is
//! `[u16 name length, name UTF-8, u8 rank, rank x u64 dims, numel x f64]`.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const CKPT_MAGIC: &[u8; 4] = b"FRCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported checkpoint version {found}")]
    VersionMismatch { found: u32 },
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: String,
    pub tensors: Vec<TensorRecord>,
    pub opt: Vec<TensorRecord>,
    pub rng_state: [u8; 32],
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        write_records(&mut out, &self.tensors);
        write_records(&mut out, &self.opt);
        out.extend_from_slice(&self.rng_state);
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0usize;
        let magic = take(bytes, &mut pos, 4)?;
        if magic != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let cfg_len = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
        let config_json = String::from_utf8(take(bytes, &mut pos, cfg_len)?.to_vec())
            .map_err(|_| CheckpointError::CorruptRecord("config is not UTF-8".into()))?;
        let tensors = read_records(bytes, &mut pos)?;
        let opt = read_records(bytes, &mut pos)?;
        let rng: [u8; 32] = take(bytes, &mut pos, 32)?
            .try_into()
            .map_err(|_| CheckpointError::CorruptRecord("rng state".into()))?;
        if pos != bytes.len() {
            return Err(CheckpointError::CorruptRecord(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Checkpoint { version, config_json, tensors, opt, rng_state: rng })
    }
}

fn write_records(out: &mut Vec<u8>, records: &[TensorRecord]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.shape.len() as u8);
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_records(bytes: &[u8], pos: &mut usize) -> Result<Vec<TensorRecord>, CheckpointError> {
    let count = u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(bytes, pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(bytes, pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::CorruptRecord("name is not UTF-8".into()))?;
        let rank = take(bytes, pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(bytes, pos, numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, shape, data });
    }
    Ok(records)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, len: usize) -> Result<&'a [u8], CheckpointError> {
    let end = pos
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::CorruptRecord("unexpected end of file".into()))?;
    let slice = &bytes[*pos..end];
    *pos = end;
    Ok(slice)
}
