//! Single-file checkpoint container.
//!
//! Layout: the line `WGAN-CKPT v1`, a little-endian u64 giving the length of
//! a JSON header, the header, then the raw little-endian tensor payloads in
//! header order. The header records each entry's key, dtype, shape and byte
//! range, plus arbitrary metadata.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "WGAN-CKPT v1";

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    key: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    entries: Vec<EntryHeader>,
}

/// Keyed tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (key, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            entries.push(EntryHeader {
                key: key.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len(),
                len: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            entries,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 9 + header.len() + payload.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let magic_len = MAGIC.len() + 1;
        if bytes.len() < magic_len + 8 || &bytes[..MAGIC.len()] != MAGIC.as_bytes() || bytes[MAGIC.len()] != b'\n' {
            return Err(bad("missing WGAN-CKPT v1 header"));
        }
        let header_len = u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().expect("8 bytes")) as usize;
        let header_start = magic_len + 8;
        let payload_start = header_start
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for e in header.entries {
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad("truncated payload"))?;
            let raw = &payload[e.offset..end];
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" if raw.len() == 4 * n => {
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                "f64" if raw.len() == 8 * n => {
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                _ => return Err(Error::Checkpoint(format!("entry {} has inconsistent dtype/size", e.key))),
            };
            tensors.insert(e.key, t);
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, device)
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dev = Device::Cpu;
        let mut c = Container::default();
        c.metadata.insert("iteration".into(), "17".into());
        c.tensors.insert("g.w".into(), Tensor::new(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3.3]], &dev).unwrap());
        c.tensors.insert("d.b".into(), Tensor::new(&[0.1f64, 1e-300], &dev).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(bytes.starts_with(b"WGAN-CKPT v1\n"));
        let back = Container::from_bytes(&bytes, &dev).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for (k, t) in &c.tensors {
            assert_eq!(tensor_bytes(t).unwrap(), tensor_bytes(&back.tensors[k]).unwrap());
            assert_eq!(t.dims(), back.tensors[k].dims());
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dev = Device::Cpu;
        assert!(Container::from_bytes(b"PK\x03\x04", &dev).is_err());
        let mut c = Container::default();
        c.tensors.insert("w".into(), Tensor::new(&[1f32, 2.0], &dev).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], &dev).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_atomic(&path, b"abc").unwrap();
        write_atomic(&path, b"defg").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"defg");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
