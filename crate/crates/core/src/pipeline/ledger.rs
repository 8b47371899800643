//! Per-run record of completed stages, their input fingerprints and the
//! digests of the files they wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub input_hash: String,
    /// Run-relative path to sha256 of the file.
    pub outputs: BTreeMap<String, String>,
    pub finished_at: String,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageRecord {
    /// Digest over all output paths and hashes; the fingerprint that
    /// downstream stages take as input.
    pub fn output_digest(&self) -> String {
        let mut h = Sha256::new();
        for (path, hash) in &self.outputs {
            h.update(path.as_bytes());
            h.update([0]);
            h.update(hash.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunLedger {
    /// Missing file means an empty ledger.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.get(stage)
    }

    /// True when `stage` completed with the same inputs and every output
    /// file under `run_dir` still has its recorded hash.
    pub fn is_fresh(&self, stage: &str, input_hash: &str, run_dir: &Path) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.status == StageStatus::Done
            && rec.input_hash == input_hash
            && rec
                .outputs
                .iter()
                .all(|(rel, hash)| hash_file(&run_dir.join(rel)).is_ok_and(|h| &h == hash))
    }

    pub fn record(&mut self, stage: &str, record: StageRecord) {
        self.stages.insert(stage.to_string(), record);
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes the run-relative `outputs`, keyed with forward slashes.
pub fn hash_outputs(run_dir: &Path, outputs: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    use rayon::prelude::*;
    outputs
        .par_iter()
        .map(|rel| {
            let key = crate::dataset::path_to_id(rel);
            Ok((key, hash_file(&run_dir.join(rel))?))
        })
        .collect()
}

/// Digest of a sequence of strings, each terminated by a NUL byte.
pub fn digest_parts<S: AsRef<str>>(parts: &[S]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_ref().as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}
