//! Binary container for dataset encodings and checkpoints.
//!
//! Layout, all little-endian:
//! `magic[8] | version u32 | h u32 | f u32 | e u32 | dtype u8 |
//!  schema_fp u64 | params_fp u64 | entry count u32 |
//!  entries... | checksum u64`
//! where each entry is `name_len u32 | name bytes | rank u32 |
//! extents u64... | elements`. The checksum is FNV-1a over every
//! preceding byte.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{DType, Scalar, Tensor};

pub const ENCODING_MAGIC: [u8; 8] = *b"SPINENC1";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SPINCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: [u8; 8] },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("element type code {found} does not match expected {expected}")]
    DtypeMismatch { expected: u8, found: u8 },
    #[error("checksum mismatch: file is corrupt")]
    Corrupt,
    #[error("truncated file at byte {0}")]
    Truncated(usize),
    #[error("malformed entry: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, SerializeError>;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Fixed-size portion of the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobHeader {
    pub magic: [u8; 8],
    pub version: u32,
    pub h: u32,
    pub f: u32,
    pub e: u32,
    pub dtype: DType,
    pub schema_fp: u64,
    pub params_fp: u64,
}

/// Parsed container contents.
#[derive(Debug, Clone)]
pub struct NamedTensors<T> {
    pub header: BlobHeader,
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> NamedTensors<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_blob<T: Scalar>(
    path: &Path,
    header: &BlobHeader,
    entries: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&header.magic);
    buf.extend_from_slice(&header.version.to_le_bytes());
    buf.extend_from_slice(&header.h.to_le_bytes());
    buf.extend_from_slice(&header.f.to_le_bytes());
    buf.extend_from_slice(&header.e.to_le_bytes());
    buf.push(header.dtype.code());
    buf.extend_from_slice(&header.schema_fp.to_le_bytes());
    buf.extend_from_slice(&header.params_fp.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &ext in tensor.shape() {
            buf.extend_from_slice(&(ext as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SerializeError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_blob<T: Scalar>(path: &Path, expected_magic: [u8; 8]) -> Result<NamedTensors<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 + 8 {
        return Err(SerializeError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(SerializeError::Corrupt);
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    let magic: [u8; 8] = c.take(8)?.try_into().unwrap();
    if magic != expected_magic {
        return Err(SerializeError::BadMagic {
            expected: expected_magic,
            found: magic,
        });
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(SerializeError::BadVersion(version));
    }
    let (h, f, e) = (c.u32()?, c.u32()?, c.u32()?);
    let dtype_code = c.take(1)?[0];
    let dtype = DType::from_code(dtype_code).ok_or(SerializeError::DtypeMismatch {
        expected: T::DTYPE.code(),
        found: dtype_code,
    })?;
    if dtype != T::DTYPE {
        return Err(SerializeError::DtypeMismatch {
            expected: T::DTYPE.code(),
            found: dtype_code,
        });
    }
    let schema_fp = c.u64()?;
    let params_fp = c.u64()?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| SerializeError::Malformed("entry name is not utf-8".into()))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * T::BYTES)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|err| SerializeError::Malformed(err.to_string()))?;
        entries.push((name, tensor));
    }
    if c.pos != body.len() {
        return Err(SerializeError::Malformed(format!(
            "{} trailing bytes after last entry",
            body.len() - c.pos
        )));
    }
    Ok(NamedTensors {
        header: BlobHeader {
            magic,
            version,
            h,
            f,
            e,
            dtype,
            schema_fp,
            params_fp,
        },
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> BlobHeader {
        BlobHeader {
            magic: ENCODING_MAGIC,
            version: FORMAT_VERSION,
            h: 10,
            f: 10,
            e: 16,
            dtype: DType::F32,
            schema_fp: 0x1234,
            params_fp: 0x5678,
        }
    }

    #[test]
    fn fnv1a64_known_vectors() {
        // reference values for the canonical 64-bit FNV-1a constants
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn roundtrip_preserves_header_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let t = Tensor::<f32>::from_f64s(&[2, 3], &[1.0, -2.5, 3.0, 0.0, 7.25, -8.0]).unwrap();
        write_blob(&path, &header(), &[("h_d", &t)]).unwrap();
        let back = read_blob::<f32>(&path, ENCODING_MAGIC).unwrap();
        assert_eq!(back.header, header());
        assert_eq!(back.get("h_d").unwrap(), &t);
    }

    #[test]
    fn flipping_one_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let t = Tensor::<f32>::zeros(&[4]);
        write_blob(&path, &header(), &[("h_d", &t)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_blob::<f32>(&path, ENCODING_MAGIC),
            Err(SerializeError::Corrupt)
        ));
    }

    #[test]
    fn wrong_magic_and_dtype_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let t = Tensor::<f32>::zeros(&[4]);
        write_blob(&path, &header(), &[("h_d", &t)]).unwrap();
        assert!(matches!(
            read_blob::<f32>(&path, CHECKPOINT_MAGIC),
            Err(SerializeError::BadMagic { .. })
        ));
        assert!(matches!(
            read_blob::<f64>(&path, ENCODING_MAGIC),
            Err(SerializeError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let t = Tensor::<f32>::zeros(&[10, 10, 16]);
        write_blob(&path, &header(), &[("h_d", &t)]).unwrap();
        let fixed = 8 + 4 + 4 + 4 + 4 + 1 + 8 + 8 + 4; // header
        let entry = 4 + 3 + 4 + 3 * 8 + 10 * 10 * 16 * 4;
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, fixed + entry + 8);
    }
}
