//! Binary tensor container.
//!
//! Layout (little-endian): magic `AVHT`, `u32` version (1), `u8` dtype,
//! `u32` ndim, `ndim × u32` extents, row-major payload. Dtypes: 0 = f32,
//! 1 = f64, 2 = i32 (label vectors).

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVHT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    I32 = 2,
}

impl TryFrom<u8> for Dtype {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::I32),
            other => Err(Error::Data(format!("unknown AVHT dtype {other}"))),
        }
    }
}

/// Decoded payload of an AVHT file.
#[derive(Debug, Clone, PartialEq)]
pub enum AvhtData {
    Real(Tensor, Dtype),
    Int(Vec<usize>, Vec<i32>),
}

fn header(dtype: Dtype, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

/// Encodes a real tensor as f32 or f64.
pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = header(dtype, t.dims());
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::I32 => {
            return Err(Error::Contract("real tensors cannot be stored as i32".into()))
        }
    }
    Ok(out)
}

pub fn encode_labels(labels: &[i32]) -> Vec<u8> {
    let mut out = header(Dtype::I32, &[labels.len()]);
    labels
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Data(format!(
                "AVHT truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<AvhtData> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("missing AVHT magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported AVHT version {version}")));
    }
    let dtype = Dtype::try_from(r.take(1)?[0])?;
    let ndim = r.u32()? as usize;
    let dims = (0..ndim)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let data = match dtype {
        Dtype::F32 => AvhtData::Real(
            Tensor::new(
                dims,
                r.take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            )?,
            dtype,
        ),
        Dtype::F64 => AvhtData::Real(
            Tensor::new(
                dims,
                r.take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )?,
            dtype,
        ),
        Dtype::I32 => AvhtData::Int(
            dims,
            r.take(4 * n)?
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    if r.pos != buf.len() {
        return Err(Error::Data(format!(
            "AVHT has {} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(data)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_file(path.as_ref(), &encode_tensor(t, dtype)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    match decode(&read_file(path)?)? {
        AvhtData::Real(t, _) => Ok(t),
        AvhtData::Int(..) => Err(Error::Data(format!(
            "{}: expected a real tensor, found i32 labels",
            path.display()
        ))),
    }
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[i32]) -> Result<()> {
    write_file(path.as_ref(), &encode_labels(labels))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<i32>> {
    let path = path.as_ref();
    match decode(&read_file(path)?)? {
        AvhtData::Int(dims, v) if dims.len() == 1 => Ok(v),
        _ => Err(Error::Data(format!(
            "{}: expected an i32 label vector",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new([1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_tensor(&t, Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"AVHT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &[2, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 16);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"NOPE").is_err());
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut bytes = encode_tensor(&t, Dtype::F32).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        bytes[8] = 9;
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn f64_and_labels_roundtrip(
            data in proptest::collection::vec(-1e6f64..1e6, 1..40),
            labels in proptest::collection::vec(0i32..2000, 1..40),
        ) {
            let t = Tensor::vector(data);
            match decode(&encode_tensor(&t, Dtype::F64).unwrap()).unwrap() {
                AvhtData::Real(back, Dtype::F64) => prop_assert_eq!(back, t),
                other => prop_assert!(false, "unexpected {:?}", other),
            }
            match decode(&encode_labels(&labels)).unwrap() {
                AvhtData::Int(dims, back) => {
                    prop_assert_eq!(dims, vec![labels.len()]);
                    prop_assert_eq!(back, labels);
                }
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }
    }
}
