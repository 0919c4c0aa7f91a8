//! Little-endian binary embedding file.
//!
//! ```text
//! "LIEM" | u32 version = 1 | u32 dim | u64 entry count
//! per entry: u64 id | u32 row count | rows * dim f32
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{EmbeddingMatrix, MatrixKind};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LIEM";
pub const VERSION: u32 = 1;

/// Rows whose norm is further than this from 1 are rescaled on import.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-4;

/// One entry of an embedding file, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct EntryRef<'a> {
    pub id: u64,
    pub data: &'a [f32],
}

pub fn encode_entries<'a>(
    dim: usize,
    entries: impl ExactSizeIterator<Item = EntryRef<'a>>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for entry in entries {
        if dim == 0 || entry.data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: entry.data.len(),
            });
        }
        out.extend_from_slice(&entry.id.to_le_bytes());
        out.extend_from_slice(&((entry.data.len() / dim) as u32).to_le_bytes());
        for v in entry.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_entries<'a>(
    path: impl AsRef<Path>,
    dim: usize,
    entries: impl ExactSizeIterator<Item = EntryRef<'a>>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_entries(dim, entries)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Raw decoded file: dimension plus `(id, row-major data)` entries in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEntries {
    pub dim: usize,
    pub entries: Vec<(u64, Vec<f32>)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated {
                path: self.path.to_owned(),
                detail: format!(
                    "needed {n} bytes for {what} at offset {}, {} left",
                    self.at,
                    self.bytes.len() - self.at
                ),
            });
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_entries(bytes: &[u8], path: &Path) -> Result<RawEntries> {
    let mut cur = Cursor { bytes, at: 0, path };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            found: magic,
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_owned(),
            found: version,
        });
    }
    let dim = cur.u32("dim")? as usize;
    let count = cur.u64("entry count")?;
    if dim == 0 && count > 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mut entries = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let id = cur.u64("entry id")?;
        let rows = cur.u32("row count")? as usize;
        let raw = cur.take(rows * dim * 4, "entry rows")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((id, data));
    }
    if cur.at != bytes.len() {
        return Err(Error::Truncated {
            path: path.to_owned(),
            detail: format!("{} trailing bytes after last entry", bytes.len() - cur.at),
        });
    }
    Ok(RawEntries { dim, entries })
}

pub fn read_entries(path: impl AsRef<Path>) -> Result<RawEntries> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&bytes, path)
}

/// Imported per-id token matrices.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: usize,
    entries: Vec<(u64, EmbeddingMatrix)>,
    slots: HashMap<u64, usize>,
}

impl EmbeddingStore {
    pub fn from_raw(raw: RawEntries, kind: MatrixKind) -> Result<Self> {
        let dim = raw.dim;
        let mut slots = HashMap::with_capacity(raw.entries.len());
        let mut entries = Vec::with_capacity(raw.entries.len());
        for (id, mut data) in raw.entries {
            renormalize_rows(id, dim, &mut data)?;
            if slots.insert(id, entries.len()).is_some() {
                return Err(Error::DuplicateId {
                    kind: "embedding",
                    id,
                });
            }
            entries.push((id, EmbeddingMatrix::from_parts(kind, dim, data)?));
        }
        Ok(Self {
            dim,
            entries,
            slots,
        })
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

    pub fn get(&self, id: u64) -> Option<&EmbeddingMatrix> {
        self.slots.get(&id).map(|&s| &self.entries[s].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &EmbeddingMatrix)> {
        self.entries.iter().map(|(id, m)| (*id, m))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_entries(
            path,
            self.dim,
            self.entries.iter().map(|(id, m)| EntryRef {
                id: *id,
                data: m.data(),
            }),
        )
    }
}

fn renormalize_rows(id: u64, dim: usize, data: &mut [f32]) -> Result<()> {
    for (row, chunk) in data.chunks_exact_mut(dim).enumerate() {
        let norm = chunk
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::ZeroNormRow { id, row });
        }
        if (norm - 1.0).abs() > RENORMALIZE_TOLERANCE {
            for v in chunk.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
    Ok(())
}

/// Loads an embedding file, renormalizing rows that are not unit length.
pub fn import_embeddings(path: impl AsRef<Path>, kind: MatrixKind) -> Result<EmbeddingStore> {
    EmbeddingStore::from_raw(read_entries(path)?, kind)
}
