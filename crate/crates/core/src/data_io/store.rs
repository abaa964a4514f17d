//! Binary embedding store.
//!
//! Little-endian layout:
//!
//! | offset | size | field                                              |
//! |--------|------|----------------------------------------------------|
//! | 0      | 4    | magic `CEMB`                                       |
//! | 4      | 4    | version (u32, currently 1)                         |
//! | 8      | 4    | dim (u32)                                          |
//! | 12     | 8    | count (u64)                                        |
//! | 20     | 1    | dtype code (0 = f32 little-endian)                 |
//! | 21     | 1    | flags (bit 0 = normalized, bit 1 = ids present)    |
//! | 22     | …    | `count × dim` f32 records                          |
//! | …      | …    | if ids present: `count × (u32 length, UTF-8 bytes)` |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::l2_norm;

pub const STORE_MAGIC: &[u8; 4] = b"CEMB";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: usize = 22;
const DTYPE_F32_LE: u8 = 0;
const FLAG_NORMALIZED: u8 = 1;
const FLAG_IDS: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    normalized: bool,
    records: Vec<f32>,
    ids: Option<Vec<String>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, normalized: bool) -> Self {
        EmbeddingStore {
            dim,
            normalized,
            records: Vec::new(),
            ids: None,
        }
    }

    /// Builds a store from `f64` vectors (narrowed to `f32`). When `normalized`
    /// is set every vector must have unit norm within 1e-3.
    pub fn from_vectors<V: AsRef<[f64]>>(
        dim: usize,
        vectors: &[V],
        ids: Option<Vec<String>>,
        normalized: bool,
    ) -> Result<Self> {
        if let Some(ids) = &ids {
            if ids.len() != vectors.len() {
                return Err(Error::Shape(format!(
                    "{} ids for {} vectors",
                    ids.len(),
                    vectors.len()
                )));
            }
        }
        let mut store = EmbeddingStore::new(dim, normalized);
        for v in vectors {
            store.push(v.as_ref())?;
        }
        store.ids = ids;
        Ok(store)
    }

    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of dim {} in a dim-{} store",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite embedding".into()));
        }
        if self.normalized {
            let n = l2_norm(v);
            if !(0.999..=1.001).contains(&n) {
                return Err(Error::InvalidArgument(format!(
                    "norm {n} outside [0.999, 1.001]"
                )));
            }
        }
        self.records.extend(v.iter().map(|&x| x as f32));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.records.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.records[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get_f64(&self, i: usize) -> Vec<f64> {
        self.get(i).iter().map(|&x| x as f64).collect()
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn set_ids(&mut self, ids: Vec<String>) -> Result<()> {
        if ids.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} records",
                ids.len(),
                self.len()
            )));
        }
        self.ids = Some(ids);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.records.chunks_exact(self.dim.max(1)).take(self.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STORE_HEADER_LEN + self.records.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(DTYPE_F32_LE);
        let mut flags = 0;
        if self.normalized {
            flags |= FLAG_NORMALIZED;
        }
        if self.ids.is_some() {
            flags |= FLAG_IDS;
        }
        out.push(flags);
        for x in &self.records {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(ids) = &self.ids {
            for id in ids {
                out.extend_from_slice(&(id.len() as u32).to_le_bytes());
                out.extend_from_slice(id.as_bytes());
            }
        }
        out
    }

    /// Parses a store. The header is validated and every size is checked
    /// against the buffer length before anything is allocated.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STORE_HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != STORE_MAGIC {
                return Err(Error::Format("bad magic, not an embedding store".into()));
            }
            return Err(Error::Corruption(format!(
                "header truncated at {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != STORE_MAGIC {
            return Err(Error::Format("bad magic, not an embedding store".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::Format(format!(
                "unsupported store version {version}"
            )));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let dtype = bytes[20];
        if dtype != DTYPE_F32_LE {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let flags = bytes[21];
        if flags & !(FLAG_NORMALIZED | FLAG_IDS) != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
        }
        let payload = (count as u128) * (dim as u128) * 4;
        let available = (bytes.len() - STORE_HEADER_LEN) as u128;
        let has_ids = flags & FLAG_IDS != 0;
        if payload > available || (!has_ids && payload != available) {
            return Err(Error::Corruption(format!(
                "header declares {count} x {dim} records ({payload} bytes) but {available} payload bytes follow"
            )));
        }
        let payload = payload as usize;
        let count = count as usize;
        let body = &bytes[STORE_HEADER_LEN..STORE_HEADER_LEN + payload];
        let records: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut ids = None;
        if has_ids {
            let mut rest = &bytes[STORE_HEADER_LEN + payload..];
            // every id needs at least its 4-byte length prefix
            if (rest.len() as u128) < (count as u128) * 4 {
                return Err(Error::Corruption("id table truncated".into()));
            }
            let mut list = Vec::with_capacity(count);
            for i in 0..count {
                if rest.len() < 4 {
                    return Err(Error::Corruption(format!("id {i} length truncated")));
                }
                let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
                rest = &rest[4..];
                if rest.len() < len {
                    return Err(Error::Corruption(format!("id {i} truncated")));
                }
                let s = std::str::from_utf8(&rest[..len])
                    .map_err(|_| Error::Corruption(format!("id {i} is not UTF-8")))?;
                list.push(s.to_string());
                rest = &rest[len..];
            }
            if !rest.is_empty() {
                return Err(Error::Corruption(format!("{} trailing bytes", rest.len())));
            }
            ids = Some(list);
        }
        let store = EmbeddingStore {
            dim,
            normalized: flags & FLAG_NORMALIZED != 0,
            records,
            ids,
        };
        if store.normalized {
            for (i, v) in store.iter().enumerate() {
                let n = v
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                if !(0.999..=1.001).contains(&n) {
                    return Err(Error::Corruption(format!(
                        "record {i} has norm {n} in a normalized store"
                    )));
                }
            }
        }
        Ok(store)
    }
}

pub fn write_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}
