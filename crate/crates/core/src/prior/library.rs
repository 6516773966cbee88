//! Latent codes of canonical training shapes, used as pose references.
//!
//! Stored in the checkpoint container with no tensors and one `LIBRARY`
//! section: `u32` count, then per entry the flat code as `f32` followed by a
//! `u32`-length-prefixed JSON description of the generating shape.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{latent_distance, LatentCode, PriorError};
use crate::vecnet::Checkpoint;

pub const LIBRARY_TAG: &[u8; 8] = b"LIBRARY\0";
const LIBRARY_KIND: &str = "efem-library";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub code: LatentCode,
    pub shape: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentLibrary {
    pub entries: Vec<LibraryEntry>,
}

#[derive(Serialize, Deserialize)]
struct Dims {
    k_rot: usize,
    n_inv: usize,
}

impl LatentLibrary {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entry with the smallest [`latent_distance`]; ties go to the lower index.
    pub fn nearest(&self, code: &LatentCode) -> Result<Option<(usize, f64)>, PriorError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d = latent_distance(code, &e.code)?;
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        Ok(best)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, PriorError> {
        let (k, n_inv) = self
            .entries
            .first()
            .map_or((0, 0), |e| (e.code.theta_r.len(), e.code.theta_inv.len()));
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            if e.code.theta_r.len() != k || e.code.theta_inv.len() != n_inv {
                return Err(PriorError::DimensionMismatch("library entries differ in size".into()));
            }
            for v in e.code.to_flat() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let json = serde_json::to_vec(&e.shape).map_err(|e| PriorError::Format(e.to_string()))?;
            payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
            payload.extend_from_slice(&json);
        }
        let dims = serde_json::to_value(Dims { k_rot: k, n_inv }).expect("dims serialize");
        let mut ck = Checkpoint::new(LIBRARY_KIND, dims);
        ck.sections.push((*LIBRARY_TAG, payload));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PriorError> {
        let bad = |m: &str| PriorError::Format(format!("library: {m}"));
        if ck.kind != LIBRARY_KIND {
            return Err(bad("wrong container kind"));
        }
        let dims: Dims = serde_json::from_value(ck.topology.clone()).map_err(|e| bad(&e.to_string()))?;
        let payload = ck.section(LIBRARY_TAG).ok_or_else(|| bad("missing LIBRARY section"))?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], PriorError> {
            let s = payload.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let flat_len = 3 * dims.k_rot + dims.n_inv + 4;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let flat: Vec<f64> = take(4 * flat_len)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let code = LatentCode::from_flat(dims.k_rot, dims.n_inv, &flat)?;
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let shape = serde_json::from_slice(take(len)?).map_err(|e| bad(&e.to_string()))?;
            entries.push(LibraryEntry { code, shape });
        }
        Ok(Self { entries })
    }

    pub fn save_file(&self, path: &Path) -> Result<(), PriorError> {
        self.to_checkpoint()?.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self, PriorError> {
        Self::from_checkpoint(&Checkpoint::read(BufReader::new(File::open(path)?))?)
    }
}
