//! Checkpoint files: `LSSC` magic, u16 version, a length-prefixed
//! `key=value` metadata block, then every tensor in name order as
//! (name, rank, u32 dims, little-endian f32 values). All integers are
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};
use crate::wire::{Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSSC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(store: &ParamStore<T>, meta: BTreeMap<String, String>) -> Self {
        Self {
            meta,
            store: store.cast(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        let mut text = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Structure(format!(
                    "metadata entry `{k}` cannot be written as key=value text"
                )));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        w.string(&text);
        w.u32(self.store.len() as u32);
        for e in self.store.entries() {
            w.string(&e.name);
            w.u32(e.shape.len() as u32);
            for &d in &e.shape {
                w.u32(d as u32);
            }
            for &v in &e.values {
                w.f32(v);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let at = r.offset();
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let text = r.string()?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("metadata line `{line}` lacks `=`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(r.f32()?);
            }
            tensors.push((name, shape, values));
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after last tensor"));
        }
        Ok(Self {
            meta,
            store: ParamStore::from_tensors(tensors)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let store = ParamStore::<f32>::from_tensors(vec![
            ("enc.0.attn_q.weight".to_string(), vec![2, 3], vec![0.5, -1.25, 3.0, 1e-30, -0.0, 7.0]),
            ("embed.tok".to_string(), vec![1, 2], vec![f32::MIN_POSITIVE, 2.0]),
        ])
        .unwrap();
        let meta = BTreeMap::from([
            ("config_hash".to_string(), "abc123".to_string()),
            ("step".to_string(), "40".to_string()),
        ]);
        Checkpoint::new(&store, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.store.values_bit_equal(&ck.store));
        assert_eq!(back.meta, ck.meta);
        assert_eq!(&bytes[..4], b"LSSC");
    }

    #[test]
    fn truncation_and_magic_are_reported() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
