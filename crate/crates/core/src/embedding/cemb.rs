//! CEMB binary format, little-endian, no padding:
//!
//! ```text
//! magic "CEMB" | version u32 = 1 | n u64 | d u32 | has_labels u8
//! features: n*d f32, row-major
//! labels:   n i32 (only when has_labels == 1)
//! ```

use std::fs;
use std::path::Path;

use super::EmbeddingSet;
use crate::{ClassId, Error, Result};

pub const MAGIC: &[u8; 4] = b"CEMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CembHeader {
    pub version: u32,
    pub n: u64,
    pub d: u32,
    pub has_labels: bool,
}

impl CembHeader {
    pub fn payload_len(&self) -> u64 {
        let rows = self.n.saturating_mul(u64::from(self.d)).saturating_mul(4);
        let labels = if self.has_labels { self.n.saturating_mul(4) } else { 0 };
        rows.saturating_add(labels)
    }
}

pub fn encode(set: &EmbeddingSet) -> Vec<u8> {
    let n = set.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * set.dim() * 4 + n * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.push(u8::from(set.labels().is_some()));
    for v in set.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = set.labels() {
        for l in labels {
            out.extend_from_slice(&(l.0 as i32).to_le_bytes());
        }
    }
    out
}

pub fn read_header(bytes: &[u8]) -> Result<CembHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let has_labels = match bytes[20] {
        0 => false,
        1 => true,
        other => return Err(Error::MalformedHeader(format!("has_labels flag {other}"))),
    };
    if d == 0 {
        return Err(Error::MalformedHeader("dimension 0".into()));
    }
    Ok(CembHeader {
        version,
        n,
        d,
        has_labels,
    })
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingSet> {
    let header = read_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = header.payload_len();
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        // Trailing bytes: the payload holds wider rows than the header declares.
        let n = header.n.max(1);
        let label_bytes = if header.has_labels { header.n * 4 } else { 0 };
        return Err(Error::DimensionMismatch {
            expected: header.d as usize,
            found: ((found - label_bytes) / (4 * n)) as usize,
        });
    }
    let n = header.n as usize;
    let d = header.d as usize;
    let (feat_bytes, label_bytes) = payload.split_at(n * d * 4);
    let features = feat_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = if header.has_labels {
        let mut labels = Vec::with_capacity(n);
        for c in label_bytes.chunks_exact(4) {
            let raw = i32::from_le_bytes(c.try_into().unwrap());
            if raw < 0 {
                return Err(Error::InvalidSet(format!("negative label {raw}")));
            }
            labels.push(ClassId(raw as u32));
        }
        Some(labels)
    } else {
        None
    };
    EmbeddingSet::new(d, features, labels)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(set)).map_err(|e| Error::io(path, e))
}
