//! KEMB embedding tables.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KEMB" | u32 version = 1 | u32 dim | u32 count | u8 normalized
//! count x { u16 key_len | key (UTF-8) | dim x f32 }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{KdsmError, Result};

pub const KEMB_MAGIC: &[u8; 4] = b"KEMB";
pub const KEMB_VERSION: u32 = 1;

/// Unit-norm tolerance for vectors held at `f32` precision.
pub const STORED_NORM_TOL: f64 = 1e-6;

/// Embeddings keyed by exact string. Values are held at the file's `f32`
/// precision so a save/load round trip is lossless; [`EmbeddingTable::lookup`]
/// re-normalizes in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Inserts `vector` after normalizing it. Replaces any existing entry.
    pub fn insert(&mut self, key: impl Into<String>, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(KdsmError::Config(format!(
                "vector width {} does not match table width {}",
                vector.len(),
                self.dim
            )));
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(KdsmError::Validation("cannot store a zero or non-finite vector".into()));
        }
        let stored = vector.iter().map(|x| (x / norm) as f32).collect();
        self.entries.insert(key.into(), stored);
        Ok(())
    }

    pub fn stored(&self, key: &str) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn lookup(&self, key: &str) -> Option<Vec<f64>> {
        self.entries.get(key).map(|v| {
            let mut out: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            crate::text::normalize(&mut out);
            out
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.entries.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(KEMB_MAGIC);
        out.extend_from_slice(&KEMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.push(1);
        for (k, v) in &self.entries {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != KEMB_MAGIC {
            return Err(KdsmError::Parse("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != KEMB_VERSION {
            return Err(KdsmError::Version {
                found: version,
                expected: KEMB_VERSION,
            });
        }
        let dim = r.u32("dim")? as usize;
        let count = r.u32("count")? as usize;
        let normalized = r.u8("normalized flag")? != 0;
        if dim == 0 {
            return Err(KdsmError::Parse("zero embedding width".into()));
        }
        let mut table = EmbeddingTable::new(dim);
        for i in 0..count {
            let klen = r.u16("key length")? as usize;
            let key = std::str::from_utf8(r.take(klen, "key")?)
                .map_err(|_| KdsmError::Parse(format!("record {i}: key is not UTF-8")))?
                .to_string();
            let raw = r.take(4 * dim, "vector")?;
            let mut v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if !normalized {
                let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(KdsmError::Parse(format!("record {key:?}: zero vector")));
                }
                v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
            }
            if table.entries.insert(key.clone(), v).is_some() {
                return Err(KdsmError::Parse(format!("duplicate key {key:?}")));
            }
        }
        if !r.is_empty() {
            return Err(KdsmError::Parse("trailing bytes after last record".into()));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| KdsmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| KdsmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor that reports truncation by field name.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(KdsmError::Truncated(format!(
                "need {n} bytes for {what} at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| KdsmError::Parse(format!("{what} is not UTF-8")))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}
