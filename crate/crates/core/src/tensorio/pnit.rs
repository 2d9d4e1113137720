//! PNIT: the little-endian `f32` tensor container shared with external tools.
//!
//! Byte layout:
//!
//! | offset        | size        | content                              |
//! |---------------|-------------|--------------------------------------|
//! | 0             | 4           | magic `b"PNIT"`                      |
//! | 4             | 1           | format version, currently `1`        |
//! | 5             | 1           | `ndim`, in `1..=4`                   |
//! | 6             | 4 * ndim    | dims, `u32` little-endian each       |
//! | 6 + 4 * ndim  | 4 * prod    | payload, row-major `f32` LE          |
//!
//! No padding, no trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNIT";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 4;

/// A dense row-major `f32` tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_NDIM {
            return Err(Error::InvalidArgument(format!(
                "tensor rank must be in 1..={MAX_NDIM}, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidArgument("dimension exceeds u32".into()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::PayloadMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Serialize into the PNIT byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse the PNIT byte layout. With `strict`, NaN and infinite payload
    /// values are rejected.
    pub fn from_bytes(bytes: &[u8], strict: bool) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::CorruptHeader(format!(
                "file is {} bytes, shorter than the fixed header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::CorruptHeader("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::CorruptHeader(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let ndim = bytes[5] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::CorruptHeader(format!("ndim {ndim} out of range")));
        }
        let header_len = 6 + 4 * ndim;
        if bytes.len() < header_len {
            return Err(Error::CorruptHeader("truncated dims".into()));
        }
        let dims: Vec<usize> = bytes[6..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptHeader("dims overflow".into()))?;
        let payload = &bytes[header_len..];
        if payload.len() % 4 != 0 || payload.len() / 4 != expected {
            return Err(Error::PayloadMismatch {
                expected,
                actual: payload.len() / 4,
            });
        }
        let mut data = Vec::with_capacity(expected);
        for (index, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if strict && !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            data.push(v);
        }
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a tensor, accepting any finite or non-finite payload.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_opts(path, false)
}

pub fn read_tensor_strict(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_opts(path, true)
}

fn read_tensor_opts(path: impl AsRef<Path>, strict: bool) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, strict)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip() {
        let t = Tensor::zeros(vec![2, 3]).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes(), true).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.dims(), &[2, 3]);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"PNIT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn payload_mismatch_is_reported() {
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let mut b = t.to_bytes();
        b.truncate(b.len() - 4);
        let err = Tensor::from_bytes(&b, false).unwrap_err();
        assert!(err.to_string().contains("payload mismatch"), "{err}");
    }

    #[test]
    fn corrupt_header_variants() {
        assert!(matches!(
            Tensor::from_bytes(b"PNI", false),
            Err(Error::CorruptHeader(_))
        ));
        let mut b = Tensor::zeros(vec![3]).unwrap().to_bytes();
        b[0] = b'X';
        assert!(matches!(
            Tensor::from_bytes(&b, false),
            Err(Error::CorruptHeader(_))
        ));
        let mut b = Tensor::zeros(vec![3]).unwrap().to_bytes();
        b[5] = 7;
        assert!(matches!(
            Tensor::from_bytes(&b, false),
            Err(Error::CorruptHeader(_))
        ));
    }

    #[test]
    fn strict_rejects_non_finite() {
        let t = Tensor::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap();
        let b = t.to_bytes();
        assert!(matches!(
            Tensor::from_bytes(&b, true),
            Err(Error::NonFinite { index: 1 })
        ));
        let lax = Tensor::from_bytes(&b, false).unwrap();
        assert!(lax.data()[1].is_nan());
    }

    #[test]
    fn rank_bounds() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn io_failure_is_distinct() {
        let err = read_tensor("/nonexistent/dir/x.pnit").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
