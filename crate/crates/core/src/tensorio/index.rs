//! Sidecar index files: named-by-position `u32` arrays stored next to PNIT
//! tensors (coreset provenance, Voronoi assignments).
//!
//! Layout: magic `b"PNIX"`, version byte `1`, `u32` LE array count, then for
//! each array a `u32` LE length followed by that many `u32` LE values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"PNIX";
pub const INDEX_VERSION: u8 = 1;

pub fn encode_index_arrays(arrays: &[&[u32]]) -> Vec<u8> {
    let total: usize = arrays.iter().map(|a| 4 + 4 * a.len()).sum();
    let mut out = Vec::with_capacity(9 + total);
    out.extend_from_slice(INDEX_MAGIC);
    out.push(INDEX_VERSION);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.len() as u32).to_le_bytes());
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_index_arrays(bytes: &[u8]) -> Result<Vec<Vec<u32>>> {
    if bytes.len() < 9 || &bytes[..4] != INDEX_MAGIC {
        return Err(Error::CorruptHeader("bad index magic".into()));
    }
    if bytes[4] != INDEX_VERSION {
        return Err(Error::CorruptHeader(format!(
            "unsupported index version {}",
            bytes[4]
        )));
    }
    let mut pos = 5;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let s = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| Error::CorruptHeader("truncated index file".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    let count = read_u32(&mut pos)? as usize;
    let mut arrays = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = read_u32(&mut pos)? as usize;
        if bytes.len() < pos + 4 * len {
            return Err(Error::PayloadMismatch {
                expected: len,
                actual: (bytes.len() - pos) / 4,
            });
        }
        let mut a = Vec::with_capacity(len);
        for _ in 0..len {
            a.push(read_u32(&mut pos)?);
        }
        arrays.push(a);
    }
    if pos != bytes.len() {
        return Err(Error::CorruptHeader("trailing bytes in index file".into()));
    }
    Ok(arrays)
}

pub fn write_index_file(path: impl AsRef<Path>, arrays: &[&[u32]]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_index_arrays(arrays)).map_err(|e| Error::io(path, e))
}

pub fn read_index_file(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_index_arrays(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = [1u32, 2, 3];
        let b: [u32; 0] = [];
        let c = [u32::MAX];
        let bytes = encode_index_arrays(&[&a, &b, &c]);
        let back = decode_index_arrays(&bytes).unwrap();
        assert_eq!(back, vec![vec![1, 2, 3], vec![], vec![u32::MAX]]);
    }

    #[test]
    fn truncated_is_error() {
        let bytes = encode_index_arrays(&[&[5, 6, 7]]);
        assert!(decode_index_arrays(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_index_arrays(&extra).is_err());
    }
}
