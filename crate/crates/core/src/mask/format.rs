//! Mask files: `LASS` magic, u16 version, source and target language
//! strings, f32 alpha, u8 provenance, u64 layout fingerprint, u32 tensor
//! count, then per tensor its name, u64 bit length and LSB-first packed
//! bits; a CRC32 of everything before it closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Bitset, ParameterMask, Provenance};
use crate::corpus::LangPair;
use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

pub const MASK_MAGIC: &[u8; 4] = b"LASS";
pub const MASK_VERSION: u16 = 1;

impl ParameterMask {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.tensors.is_empty() {
            return Err(Error::format(0, "refusing to write a mask with no tensors"));
        }
        let mut w = Writer::default();
        w.bytes(MASK_MAGIC);
        w.u16(MASK_VERSION);
        w.string(&self.pair.src);
        w.string(&self.pair.tgt);
        w.f32(self.alpha);
        w.u8(self.provenance as u8);
        w.u64(self.fingerprint);
        w.u32(self.tensors.len() as u32);
        for (name, bits) in &self.tensors {
            w.string(name);
            w.u64(bits.len() as u64);
            w.bytes(bits.as_bytes());
        }
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        Ok(w.into_inner())
    }

    /// Parses and verifies the CRC trailer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(0, "truncated mask file"));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let mask = Self::parse_body(&bytes[..body_len])?;
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(Error::format(
                body_len,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        Ok(mask)
    }

    /// Parses without checking the CRC trailer. Only useful for inspecting
    /// damaged files.
    pub fn from_bytes_unverified(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(0, "truncated mask file"));
        }
        Self::parse_body(&bytes[..bytes.len() - 4])
    }

    fn parse_body(body: &[u8]) -> Result<Self> {
        let mut r = Reader::new(body);
        if r.take(4)? != MASK_MAGIC {
            return Err(Error::format(0, "not a mask file (bad magic)"));
        }
        let at = r.offset();
        let version = r.u16()?;
        if version != MASK_VERSION {
            return Err(Error::format(at, format!("unsupported mask version {version}")));
        }
        let src = r.string()?;
        let tgt = r.string()?;
        let alpha = r.f32()?;
        let at = r.offset();
        let provenance = Provenance::from_u8(r.u8()?)
            .ok_or_else(|| Error::format(at, "unknown provenance code"))?;
        let fingerprint = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let at = r.offset();
            let len = usize::try_from(r.u64()?)
                .map_err(|_| Error::format(at, "bit length overflows usize"))?;
            let packed = r.take(len.div_ceil(8))?.to_vec();
            let bits = Bitset::from_packed(len, packed)
                .ok_or_else(|| Error::format(at, format!("padding bits set in `{name}`")))?;
            if tensors.insert(name.clone(), bits).is_some() {
                return Err(Error::format(at, format!("duplicate tensor `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "unexpected bytes before checksum"));
        }
        if tensors.is_empty() {
            return Err(Error::format(r.offset(), "mask has no tensors"));
        }
        Ok(ParameterMask::from_parts(
            tensors,
            alpha,
            provenance,
            LangPair::new(&src, &tgt),
            fingerprint,
        ))
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
