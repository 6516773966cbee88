//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//! `"EFEMCKPT"`, `u32` version, `u32` header length, UTF-8 JSON header,
//! then every tensor listed in the header as row-major `f32`, then zero or
//! more sections (`[u8; 8]` tag, `u64` length, payload).

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::VecNetError;

pub const MAGIC: &[u8; 8] = b"EFEMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    topology: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub topology: serde_json::Value,
    pub tensors: Vec<(String, DMatrix<f64>)>,
    pub sections: Vec<([u8; 8], Vec<u8>)>,
}

fn corrupt(msg: impl Into<String>) -> VecNetError {
    VecNetError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str, topology: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            topology,
            tensors: Vec::new(),
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &DMatrix<f64>) {
        self.tensors.push((name.into(), m.clone()));
    }

    /// Looks up a tensor and checks its shape.
    pub fn tensor(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>, VecNetError> {
        let (_, m) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if m.shape() != (rows, cols) {
            return Err(corrupt(format!("tensor {name} is {:?}, expected {:?}", m.shape(), (rows, cols))));
        }
        Ok(m.clone())
    }

    pub fn section(&self, tag: &[u8; 8]) -> Option<&[u8]> {
        self.sections.iter().find(|(t, _)| t == tag).map(|(_, p)| p.as_slice())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), VecNetError> {
        let header = Header {
            kind: self.kind.clone(),
            topology: self.topology.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorInfo {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len() + 4 * self.tensors.iter().map(|t| t.1.len()).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    buf.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
                }
            }
        }
        for (tag, payload) in &self.sections {
            buf.extend_from_slice(tag);
            buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            buf.extend_from_slice(payload);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, VecNetError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let hlen = cur.u32()? as usize;
        let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let raw = cur.take(4 * t.rows * t.cols)?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("tensor {} has non-finite entries", t.name)));
            }
            tensors.push((t.name.clone(), DMatrix::from_row_slice(t.rows, t.cols, &vals)));
        }
        let mut sections = Vec::new();
        while cur.pos < bytes.len() {
            let tag: [u8; 8] = cur.take(8)?.try_into().expect("8 bytes");
            let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
            sections.push((tag, cur.take(len)?.to_vec()));
        }
        Ok(Self {
            kind: header.kind,
            topology: header.topology,
            tensors,
            sections,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VecNetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, VecNetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Rounds every entry to the nearest `f32`, matching what a save/load round trip yields.
pub fn round_to_f32(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = *v as f32 as f64);
}
