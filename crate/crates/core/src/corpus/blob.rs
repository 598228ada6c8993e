//! Binary payload files: an 8-byte magic and a version byte, then records of
//! `u8 rank, rank × u32 dims, dims-product × f32`, all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const AUDIO_MAGIC: &[u8; 8] = b"PAVSRAU\0";
pub const VIDEO_MAGIC: &[u8; 8] = b"PAVSRVI\0";
pub const BLOB_VERSION: u8 = 1;

pub struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut buf = magic.to_vec();
        buf.push(BLOB_VERSION);
        Self { buf }
    }

    /// Appends one record and returns its byte offset.
    pub fn push(&mut self, shape: &[usize], data: &[f32]) -> u64 {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self.buf.len() as u64;
        self.buf.push(shape.len() as u8);
        for &d in shape {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in data {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        offset
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub struct BlobReader {
    path: PathBuf,
    bytes: Vec<u8>,
}

impl BlobReader {
    pub fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 9 || &bytes[..8] != magic {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "bad magic".into(),
            });
        }
        if bytes[8] != BLOB_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported blob version {}", bytes[8]),
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            bytes,
        })
    }

    pub fn record(&self, offset: u64) -> Result<(Vec<usize>, Vec<f32>)> {
        read_record(&self.bytes, offset).ok_or_else(|| Error::Format {
            path: self.path.clone(),
            detail: format!("truncated or invalid record at offset {offset}"),
        })
    }
}

pub fn read_record(bytes: &[u8], offset: u64) -> Option<(Vec<usize>, Vec<f32>)> {
    let mut pos = usize::try_from(offset).ok()?;
    if pos < 9 {
        return None;
    }
    let rank = *bytes.get(pos)? as usize;
    pos += 1;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?);
        shape.push(d as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let raw = bytes.get(pos..pos.checked_add(n.checked_mul(4)?)?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Some((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.audio");
        let mut w = BlobWriter::new(AUDIO_MAGIC);
        let a = w.push(&[3], &[1.0, -2.0, 3.5]);
        let b = w.push(&[2, 1, 2], &[0.0, 1.0, 2.0, 3.0]);
        w.write(&path).unwrap();
        let r = BlobReader::open(&path, AUDIO_MAGIC).unwrap();
        assert_eq!(r.record(a).unwrap(), (vec![3], vec![1.0, -2.0, 3.5]));
        assert_eq!(r.record(b).unwrap().0, vec![2, 1, 2]);
        assert!(r.record(b + 29).is_err());
        assert!(r.record(2).is_err());
        assert!(BlobReader::open(&path, VIDEO_MAGIC).is_err());
    }
}
