//! On-disk feature cache: one binary matrix per (backbone, split) plus a
//! sidecar CSV of `row_id,content_hash`.
//!
//! Binary layout, all little-endian: magic `FFEA`, u32 version, u32 rows,
//! u32 cols, then rows * cols f32 values in row-major order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::FeatureMatrix;

pub const CACHE_MAGIC: [u8; 4] = *b"FFEA";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A feature matrix together with the content hash of each row's source.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub features: FeatureMatrix,
    pub hashes: Vec<String>,
}

impl FeatureCache {
    pub fn new(features: FeatureMatrix, hashes: Vec<String>) -> Result<Self> {
        if hashes.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} hashes for {} feature rows",
                hashes.len(),
                features.rows()
            )));
        }
        Ok(Self { features, hashes })
    }

    pub fn ids_path(bin: &Path) -> PathBuf {
        bin.with_extension("ids.csv")
    }

    pub fn write(&self, bin: &Path) -> Result<()> {
        let m = &self.features;
        let mut bytes = Vec::with_capacity(HEADER_LEN + m.data().len() * 4);
        bytes.extend_from_slice(&CACHE_MAGIC);
        bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;

        let ids = Self::ids_path(bin);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&ids)
            .map_err(|e| Error::csv(&ids, e))?;
        w.write_record(["row_id", "content_hash"]).map_err(|e| Error::csv(&ids, e))?;
        for (id, hash) in m.row_ids().iter().zip(&self.hashes) {
            w.write_record([id, hash]).map_err(|e| Error::csv(&ids, e))?;
        }
        w.flush().map_err(|e| Error::io(&ids, e))
    }

    pub fn read(bin: &Path) -> Result<Self> {
        let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
        let corrupt = |what: &str| Error::Dataset(format!("{}: {what}", bin.display()));
        if bytes.len() < HEADER_LEN || bytes[..4] != CACHE_MAGIC {
            return Err(corrupt("not a feature cache file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != CACHE_VERSION {
            return Err(corrupt(&format!("unsupported cache version {}", word(4))));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        if bytes.len() != HEADER_LEN + rows * cols * 4 {
            return Err(corrupt("truncated feature data"));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let ids = Self::ids_path(bin);
        let mut reader = csv::Reader::from_path(&ids).map_err(|e| Error::csv(&ids, e))?;
        let mut row_ids = Vec::with_capacity(rows);
        let mut hashes = Vec::with_capacity(rows);
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(&ids, e))?;
            row_ids.push(rec[0].to_string());
            hashes.push(rec[1].to_string());
        }
        if row_ids.len() != rows {
            return Err(corrupt("row id sidecar does not match row count"));
        }
        Self::new(FeatureMatrix::new(cols, data, row_ids)?, hashes)
    }

    /// Feature rows keyed by content hash.
    pub fn by_hash(&self) -> HashMap<&str, &[f32]> {
        self.hashes
            .iter()
            .enumerate()
            .map(|(i, h)| (h.as_str(), self.features.row(i)))
            .collect()
    }
}
