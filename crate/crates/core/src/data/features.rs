//! Per-item feature vectors and the `.frf` binary container.
//!
//! Layout (little-endian): magic `FRF1`, u32 item_count, u32 dim, then
//! item_count records of `[u32 item_id, dim x f32]`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, Dataset};

pub const FRF_MAGIC: &[u8; 4] = b"FRF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Raw feature table keyed by original item id, as stored on disk.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub modality: Modality,
    pub dim: usize,
    pub vectors: HashMap<u64, Vec<f64>>,
}

impl FeatureTable {
    pub fn load(path: impl AsRef<Path>, modality: Modality) -> Result<Self, DataError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, modality)
    }

    pub fn from_bytes(bytes: &[u8], modality: Modality) -> Result<Self, DataError> {
        if bytes.len() < 4 {
            return Err(DataError::BadMagic);
        }
        if &bytes[..4] != FRF_MAGIC {
            if &bytes[..3] == b"FRF" {
                return Err(DataError::VersionMismatch {
                    found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
                });
            }
            return Err(DataError::BadMagic);
        }
        let mut pos = 4;
        let item_count = read_u32(bytes, &mut pos)? as usize;
        let dim = read_u32(bytes, &mut pos)? as usize;
        let mut vectors = HashMap::with_capacity(item_count);
        for _ in 0..item_count {
            let id = read_u32(bytes, &mut pos)? as u64;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let raw = read_u32(bytes, &mut pos)?;
                let x = f32::from_le_bytes(raw.to_le_bytes()) as f64;
                if !x.is_finite() {
                    return Err(DataError::Corrupt(format!("non-finite feature for item {id}")));
                }
                v.push(x);
            }
            vectors.insert(id, v);
        }
        if pos != bytes.len() {
            return Err(DataError::Corrupt(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(FeatureTable { modality, dim, vectors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut ids: Vec<&u64> = self.vectors.keys().collect();
        ids.sort_unstable();
        let mut out = Vec::with_capacity(12 + ids.len() * (4 + self.dim * 4));
        out.extend_from_slice(FRF_MAGIC);
        out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in ids {
            out.extend_from_slice(&(*id as u32).to_le_bytes());
            for &x in &self.vectors[id] {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Remap onto the dataset's reindexed catalog. Row 0 is the zero padding
    /// row; every catalog item must be covered.
    pub fn reindex(&self, ds: &Dataset) -> Result<DenseFeatures, DataError> {
        let n = ds.n_items();
        let mut rows = vec![0.0; (n + 1) * self.dim];
        for (&raw, &new) in &ds.item_index {
            let v = self.vectors.get(&raw).ok_or(DataError::MissingItem(raw))?;
            rows[new as usize * self.dim..(new as usize + 1) * self.dim].copy_from_slice(v);
        }
        Ok(DenseFeatures { dim: self.dim, n_items: n, rows })
    }
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, DataError> {
    let end = *pos + 4;
    if end > bytes.len() {
        return Err(DataError::Corrupt("unexpected end of file".into()));
    }
    let v = u32::from_le_bytes(bytes[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

/// Feature rows keyed by reindexed item id; row 0 is all zeros.
#[derive(Debug, Clone)]
pub struct DenseFeatures {
    pub dim: usize,
    pub n_items: usize,
    rows: Vec<f64>,
}

impl DenseFeatures {
    pub fn row(&self, item: u32) -> &[f64] {
        let i = item as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}
