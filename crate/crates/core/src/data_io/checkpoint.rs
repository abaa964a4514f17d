//! Checkpoint container for model parameters.
//!
//! Little-endian layout: magic `CCKP`, version u32 (1), metadata length u32,
//! metadata (UTF-8 JSON), section count u32, then per section: name length
//! u32, name (UTF-8), value count u64, values (f64).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            metadata,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.sections.push((name.into(), values));
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("checkpoint has no section {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata.to_string();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, values) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Corruption("checkpoint metadata is not UTF-8".into()))?;
        let metadata = serde_json::from_str(meta)
            .map_err(|e| Error::Corruption(format!("checkpoint metadata: {e}")))?;
        let n = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corruption("section name is not UTF-8".into()))?
                .to_string();
            let count = r.u64()?;
            let nbytes = count
                .checked_mul(8)
                .filter(|&b| b <= (bytes.len() - r.pos) as u64)
                .ok_or_else(|| Error::Corruption(format!("section {name:?} truncated")))?;
            let values = r
                .take(nbytes as usize)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            sections.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(
                "trailing bytes after last section".into(),
            ));
        }
        Ok(Checkpoint { metadata, sections })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::new(serde_json::json!({"kind": "toy", "d": 3}));
        c.push("a", vec![1.0, -2.5, f64::MIN_POSITIVE]);
        c.push("empty", vec![]);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.section("a").unwrap()[1], -2.5);
        assert!(back.section("b").is_err());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"XXXX"),
            Err(Error::Format(_))
        ));
    }
}
