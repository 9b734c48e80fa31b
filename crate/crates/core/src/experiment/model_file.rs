//! The `BPRN` weight file and its DEFLATE-compressed size.
//!
//! Layout, little-endian throughout: magic `BPRN`, version `u16`, tensor count
//! `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! one `u32` per extent and the `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;

use crate::nn::ModelParams;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BPRN";
pub const VERSION: u16 = 1;

/// Serializes every tensor in registry order. Prunability is not stored.
pub fn encode_model(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + 4 * crate::nn::count_params(params));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::ModelFormat(format!("name too long: {name}")))?;
        let rank = u8::try_from(p.tensor.rank()).map_err(|_| Error::ModelFormat(format!("rank too large: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in p.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::ModelFormat(format!("extent too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a `BPRN` file. Tensors whose name ends in `.kernel` come back
/// marked prunable, matching how models are built.
pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::ModelFormat(e.to_string()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::ModelFormat("payload overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::ModelFormat(e.to_string()))?;
        let prunable = name.ends_with(".kernel");
        params.insert(name, tensor, prunable)?;
    }
    if r.at != bytes.len() {
        return Err(Error::ModelFormat(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(params)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the model file; returns the number of bytes written.
pub fn serialize_model(params: &ModelParams, path: &Path) -> Result<u64> {
    let bytes = encode_model(params)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    decode_model(&fs::read(path)?)
}

/// Size of the gzip stream (default level) of `bytes`.
pub fn compressed_len(bytes: &[u8]) -> Result<u64> {
    let mut enc = GzEncoder::new(Vec::with_capacity(bytes.len() / 2), Compression::default());
    enc.write_all(bytes)?;
    Ok(enc.finish()?.len() as u64)
}

/// Compressed size of a serialized model file.
pub fn measure_compression(path: &Path) -> Result<u64> {
    compressed_len(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count_params, init_params, ArchSpec, ModelKind};

    #[test]
    fn round_trip_is_bit_exact() {
        let p = init_params(&ArchSpec::mnist(), ModelKind::BetaVaeClassif, 4).unwrap();
        let bytes = encode_model(&p).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn size_is_payload_plus_headers() {
        let p = init_params(&ArchSpec::mnist(), ModelKind::CnnClassif, 0).unwrap();
        let header: usize = p.iter().map(|(n, t)| 2 + n.len() + 1 + 4 * t.tensor.rank()).sum();
        assert_eq!(encode_model(&p).unwrap().len(), 10 + header + 4 * count_params(&p));
    }

    #[test]
    fn zeros_compress_hard() {
        let mut p = ModelParams::new();
        p.insert("w.kernel", Tensor::<f32>::zeros(vec![100, 100]), true).unwrap();
        let bytes = encode_model(&p).unwrap();
        assert!((compressed_len(&bytes).unwrap() as f64) < 0.02 * bytes.len() as f64);
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = init_params(&ArchSpec::mnist(), ModelKind::CnnClassif, 0).unwrap();
        let bytes = encode_model(&p).unwrap();
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn atomic_write_and_measure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bprn");
        let p = init_params(&ArchSpec::mnist(), ModelKind::CnnClassif, 0).unwrap();
        let n = serialize_model(&p, &path).unwrap();
        assert_eq!(n, fs::metadata(&path).unwrap().len());
        assert_eq!(load_model(&path).unwrap(), p);
        assert_eq!(measure_compression(&path).unwrap(), compressed_len(&encode_model(&p).unwrap()).unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
