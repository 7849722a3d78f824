//! Flat binary tensor archive used for checkpoints and feature caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SELDARC\0"
//! version   u32      ARCHIVE_VERSION
//! dtype     u8       0 = f32, 1 = f64
//! meta_len  u64      followed by meta_len bytes of UTF-8 metadata
//! count     u32      number of entries, then per entry:
//!   name_len u32, name bytes, ndim u32, ndim × u64 extents, raw scalars
//! sha256    32 bytes over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Float};
use crate::tensor::{numel, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SELDARC\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    /// Free-form structured text (JSON by convention).
    pub meta: String,
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Archive<T> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < ARCHIVE_MAGIC.len() + 32 {
            return Err(TensorError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(TensorError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(TensorError::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(TensorError::Archive(format!("unsupported version {version}")));
        }
        let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| TensorError::Archive("unknown dtype".into()))?;
        if dtype != T::DTYPE {
            return Err(TensorError::Archive(format!("archive holds {:?}, requested {:?}", dtype, T::DTYPE)));
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| TensorError::Archive("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| TensorError::Archive("entry name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let raw = r.take(n * dtype.size())?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(TensorError::Archive("trailing bytes".into()));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| TensorError::Archive("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive<f32> {
        let mut a = Archive::new("{\"k\":1}");
        a.push("w", Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        a.push("s", Tensor::scalar(7.0));
        a
    }

    #[test]
    fn truncation_is_a_checksum_failure() {
        let bytes = sample().to_bytes();
        for cut in [1, 5, 40] {
            let err = Archive::<f32>::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, TensorError::Checksum), "{err}");
        }
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let bytes = sample().to_bytes();
        assert!(Archive::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn version_field_is_written() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], ARCHIVE_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), ARCHIVE_VERSION);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<u32>(), 0..64), meta in ".{0,40}") {
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let mut a = Archive::new(meta);
            a.push("x", Tensor::new(vec![data.len()], data.clone()).unwrap());
            let back = Archive::<f32>::from_bytes(&a.to_bytes()).unwrap();
            let got: Vec<u32> = back.get("x").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, vals);
            prop_assert_eq!(back.meta, a.meta);
        }
    }
}
