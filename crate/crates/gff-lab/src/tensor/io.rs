//! `GFFT` tensor dumps: magic `GFFT`, `u32` version 1, `u8` dtype
//! (0 = f32, 1 = f64), `u32` rank, rank x `u32` extents, then the row-major
//! little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GFFT";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * t.shape().len() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::PRECISION.tag());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("GFFT dump", format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads the dtype tag without decoding the payload.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::format("GFFT dump", "bad magic"));
    }
    Precision::from_tag(bytes[8]).ok_or_else(|| Error::format("GFFT dump", format!("unknown dtype {}", bytes[8])))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("GFFT dump", "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format("GFFT dump", format!("unsupported version {version}")));
    }
    let tag = cur.take(1)?[0];
    match Precision::from_tag(tag) {
        Some(p) if p == T::PRECISION => {}
        Some(p) => return Err(Error::format("GFFT dump", format!("stored as {p:?}, requested {:?}", T::PRECISION))),
        None => return Err(Error::format("GFFT dump", format!("unknown dtype {tag}"))),
    }
    let ndim = cur.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format("GFFT dump", format!("rank {ndim}")));
    }
    let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("GFFT dump", "extent overflow"))?;
    let payload = cur.take(numel.checked_mul(T::BYTES).ok_or_else(|| Error::format("GFFT dump", "extent overflow"))?)?;
    if cur.at != bytes.len() {
        return Err(Error::format("GFFT dump", format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| Error::format("GFFT dump", e.to_string()))
}

pub fn write_to<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn read_from<T: Scalar>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<reader>", e))?;
    decode(&bytes)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"GFFT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b[8], 0);
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &2u32.to_le_bytes());
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[21..25], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 29);
    }

    #[test]
    fn truncation_and_magic_are_errors() {
        let t = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64);
        let b = encode(&t);
        for cut in 0..b.len() {
            assert!(decode::<f64>(&b[..cut]).is_err());
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        assert!(decode::<f32>(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            let mut s = seed;
            let t = Tensor::<f64>::from_fn(&shape, |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            });
            let back = decode::<f64>(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
