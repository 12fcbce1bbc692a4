//! Binary tensor container shared by checkpoints and dataset splits.
//!
//! ```text
//! magic    "MOMEBIN\0"                 8 bytes
//! version  u32 LE
//! meta     u64 LE length, JSON bytes
//! count    u64 LE
//! tensor   u32 LE name length, UTF-8 name,
//!          u32 LE rank, rank × u64 LE dims,
//!          product(dims) × f64 LE
//! sha256   of every preceding byte     32 bytes
//! ```

use mome_core::Tensor;
use sha2::{Digest, Sha256};

pub const MAGIC: [u8; 8] = *b"MOMEBIN\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("not a mome container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
    #[error("content hash mismatch")]
    Hash,
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("JSON values serialize");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(FormatError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(FormatError::Hash);
        }
        let meta_len = r.len()?;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| FormatError::Malformed(format!("metadata: {e}")))?;
        let count = r.len()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FormatError::Malformed(format!("tensor {name} is too large")))?;
            let raw = r.take(len.checked_mul(8).ok_or(FormatError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(FormatError::Malformed("trailing bytes after last tensor".into()));
        }
        Ok(Container { meta, tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize, FormatError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| FormatError::Truncated)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            meta: serde_json::json!({"kind": "test", "step": 3}),
            tensors: vec![
                ("a".into(), Tensor::matrix(2, 2, vec![1.0, -0.5, 3.25, 1e-300]).unwrap()),
                ("s".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let bytes = sample().encode();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert_eq!(Container::decode(&bytes), Err(FormatError::Hash));
        assert_eq!(Container::decode(b"nope"), Err(FormatError::BadMagic));
        let good = sample().encode();
        assert!(Container::decode(&good[..good.len() - 40]).is_err());
    }
}
