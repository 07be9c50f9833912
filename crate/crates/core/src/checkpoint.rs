//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TALK"  u32 version (=1)  u32 tensor_count
//! per tensor:
//!   u32 name_len  name (UTF-8)  u8 dtype (0=f32, 1=f64)
//!   u32 rank  rank x u64 extents  payload (LE, row-major)
//! ```
//!
//! Entries are written in name order, so `save(load(f))` reproduces `f`
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, TalkError};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TALK";
pub const VERSION: u32 = 1;

/// A tensor of either storage type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type, casting if the stored dtype
    /// differs.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Wraps a generic tensor without changing its dtype.
pub fn to_any<T: Scalar>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        DType::F32 => AnyTensor::F32(t.cast()),
        DType::F64 => AnyTensor::F64(t.cast()),
    }
}

pub type TensorMap = BTreeMap<String, AnyTensor>;

fn payload<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(map: &TensorMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(map.len())
        .map_err(|_| TalkError::Config("too many tensors for one archive".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in map {
        if name.is_empty() {
            return Err(TalkError::Config("tensor names must be non-empty".into()));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dtype() as u8);
        let shape = tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match tensor {
            AnyTensor::F32(t) => payload(t, &mut out),
            AnyTensor::F64(t) => payload(t, &mut out),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(TalkError::Format {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.fail(format!(
                "truncated while reading {what} ({n} bytes wanted, {} left)",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize], len: usize) -> Result<Tensor<T>> {
        let width = T::DTYPE.size_of();
        let raw = self.take(len.saturating_mul(width), "payload")?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Tensor::from_vec(shape, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return r.fail(format!("bad magic {magic:?}"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = match std::str::from_utf8(name_bytes) {
            Ok(s) if !s.is_empty() => s.to_owned(),
            Ok(_) => return r.fail("empty tensor name"),
            Err(_) => return r.fail("tensor name is not UTF-8"),
        };
        let dtype_byte = r.u8("dtype")?;
        let Some(dtype) = DType::from_byte(dtype_byte) else {
            r.pos -= 1;
            return r.fail(format!("unknown dtype {dtype_byte}"));
        };
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return r.fail("rank 0 tensor");
        }
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut len = 1usize;
        for _ in 0..rank {
            let e = r.u64("extent")?;
            if e == 0 {
                return r.fail("zero extent");
            }
            let e = usize::try_from(e).or_else(|_| r.fail("extent overflows usize"))?;
            len = match len.checked_mul(e) {
                Some(l) => l,
                None => return r.fail("element count overflows usize"),
            };
            shape.push(e);
        }
        let tensor = match dtype {
            DType::F32 => AnyTensor::F32(r.tensor(&shape, len)?),
            DType::F64 => AnyTensor::F64(r.tensor(&shape, len)?),
        };
        if map.insert(name.clone(), tensor).is_some() {
            r.pos = start;
            return r.fail(format!("duplicate tensor name {name:?}"));
        }
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(map)
}

pub fn save_tensors(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(map)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<TensorMap> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_single_tensor() {
        let mut m = TensorMap::new();
        m.insert(
            "w".into(),
            AnyTensor::F32(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()),
        );
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn file_size_follows_layout() {
        let mut m = TensorMap::new();
        m.insert("a".into(), AnyTensor::F32(Tensor::zeros(&[2, 2])));
        let bytes = encode(&m).unwrap();
        // header: magic + version + count
        let header = 4 + 4 + 4;
        // entry: name_len + name + dtype + rank + 2 extents
        let entry = 4 + 1 + 1 + 4 + 2 * 8;
        assert_eq!(bytes.len(), header + entry + 16);
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let mut bytes = encode(&TensorMap::new()).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(TalkError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_version_are_format_errors() {
        let mut m = TensorMap::new();
        m.insert("x".into(), AnyTensor::F64(Tensor::zeros(&[4])));
        let bytes = encode(&m).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(TalkError::Format { offset, message }) => {
                assert!(message.contains("truncated"), "{message}");
                assert!(offset as usize <= cut.len());
            }
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad = bytes.clone();
        bad[4] = 2;
        match decode(&bad) {
            Err(TalkError::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_name_rejected() {
        let mut m = TensorMap::new();
        m.insert(String::new(), AnyTensor::F32(Tensor::zeros(&[1])));
        assert!(encode(&m).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = AnyTensor> {
        (1usize..4, 1usize..4, any::<bool>()).prop_flat_map(|(r, c, wide)| {
            prop::collection::vec(any::<u64>(), r * c).prop_map(move |bits| {
                if wide {
                    // arbitrary bit patterns, NaN payloads included
                    let data = bits.iter().map(|&b| f64::from_bits(b)).collect();
                    AnyTensor::F64(Tensor::from_vec(&[r, c], data).unwrap())
                } else {
                    let data = bits.iter().map(|&b| f32::from_bits(b as u32)).collect();
                    AnyTensor::F32(Tensor::from_vec(&[r, c], data).unwrap())
                }
            })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            entries in prop::collection::btree_map("[a-z.]{1,12}", arb_tensor(), 0..5)
        ) {
            let bytes = encode(&entries).unwrap();
            let back = decode(&bytes).unwrap();
            // compare re-encoded bytes: NaN != NaN under PartialEq
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
