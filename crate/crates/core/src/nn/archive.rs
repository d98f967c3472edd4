//! Single-file weight archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"WSEGWTS1"            magic
//! u64                    header length in bytes
//! header                 UTF-8 JSON, see `Header`
//! data                   raw tensor bytes, concatenated in manifest order
//! ```
//!
//! The header carries a SHA-256 of the data section so that truncated or
//! corrupted archives are detected before any tensor is touched.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WSEGWTS1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub variant: String,
    pub seed: u64,
    /// Free-form training provenance (epoch, metrics, learning rate, ...).
    #[serde(default)]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    metadata: ArchiveMeta,
    tensors: Vec<TensorEntry>,
    data_len: u64,
    data_sha256: String,
}

/// A decoded, integrity-checked archive.
#[derive(Clone, Debug)]
pub struct Archive {
    pub metadata: ArchiveMeta,
    pub tensors: Vec<(TensorEntry, Tensor)>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Contract(format!("cannot archive dtype {other:?}"))),
    }
}

pub fn encode(store: &ParamStore, metadata: &ArchiveMeta) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        let t = p.var.as_tensor();
        let dtype = dtype_name(t.dtype())?;
        let offset = data.len() as u64;
        match t.dtype() {
            DType::F32 => {
                for v in t.flatten_all()?.to_vec1::<f32>()? {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype: dtype.to_string(),
            shape: t.dims().to_vec(),
            offset,
            len: data.len() as u64 - offset,
        });
    }
    let header = Header {
        metadata: metadata.clone(),
        tensors,
        data_len: data.len() as u64,
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Integrity(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("missing archive magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(Error::Integrity(format!(
            "header truncated: need {header_len} bytes, have {}",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    let data = &body[header_len..];
    if data.len() as u64 != header.data_len {
        return Err(Error::Integrity(format!(
            "data section is {} bytes, header declares {}",
            data.len(),
            header.data_len
        )));
    }
    if hex::encode(Sha256::digest(data)) != header.data_sha256 {
        return Err(Error::Integrity("data checksum mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        let count: usize = e.shape.iter().product();
        let raw = data
            .get(start..end)
            .ok_or_else(|| Error::Integrity(format!("tensor {} out of bounds", e.name)))?;
        let dev = &candle_core::Device::Cpu;
        let t = match e.dtype.as_str() {
            "f32" if raw.len() == count * 4 => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), dev)?
            }
            "f64" if raw.len() == count * 8 => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), dev)?
            }
            other => {
                return Err(Error::Integrity(format!(
                    "tensor {}: dtype {other} with {} bytes for shape {:?}",
                    e.name,
                    raw.len(),
                    e.shape
                )))
            }
        };
        tensors.push((e, t));
    }
    Ok(Archive { metadata: header.metadata, tensors })
}

/// Copies every archived tensor into `store`. Names and shapes are checked
/// for the whole archive before the first write, so a rejected archive
/// leaves the store untouched.
pub fn apply(store: &ParamStore, archive: &Archive) -> Result<()> {
    let expected: Vec<_> = store.iter().collect();
    for (i, p) in expected.iter().enumerate() {
        let Some((entry, t)) = archive.tensors.get(i) else {
            return Err(Error::ArchiveMismatch(format!("archive lacks tensor {}", p.name)));
        };
        if entry.name != p.name {
            return Err(Error::ArchiveMismatch(format!(
                "first mismatching name: archive has {} where network expects {}",
                entry.name, p.name
            )));
        }
        if t.dims() != p.var.as_tensor().dims() {
            return Err(Error::ArchiveMismatch(format!(
                "{}: archive shape {:?}, network shape {:?}",
                p.name,
                t.dims(),
                p.var.as_tensor().dims()
            )));
        }
    }
    if let Some((extra, _)) = archive.tensors.get(expected.len()) {
        return Err(Error::ArchiveMismatch(format!("unexpected extra tensor {}", extra.name)));
    }
    let converted = expected
        .iter()
        .zip(&archive.tensors)
        .map(|(p, (_, t))| t.to_dtype(p.var.dtype()))
        .collect::<candle_core::Result<Vec<_>>>()?;
    for (p, t) in expected.iter().zip(&converted) {
        p.var.set(t)?;
    }
    Ok(())
}

pub fn write_file(path: &Path, store: &ParamStore, metadata: &ArchiveMeta) -> Result<()> {
    let bytes = encode(store, metadata)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Builder, Init};

    fn store(seed: u64, names: &[(&str, &[usize])]) -> ParamStore {
        let mut b = Builder::new(seed, DType::F32);
        for (n, s) in names {
            b.trainable(*n, s, Init::KaimingFanIn { fan_in: 4 }).unwrap();
        }
        b.finish()
    }

    #[test]
    fn truncation_is_detected_without_mutation() {
        let src = store(1, &[("a", &[3, 4]), ("b", &[5])]);
        let bytes = encode(&src, &ArchiveMeta::default()).unwrap();
        let dst = store(2, &[("a", &[3, 4]), ("b", &[5])]);
        let before = dst.get("a").unwrap().var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let after = dst.get("a").unwrap().var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn shape_mismatch_is_rejected_before_writes() {
        let src = store(1, &[("a", &[3, 4]), ("b", &[5])]);
        let archive = decode(&encode(&src, &ArchiveMeta::default()).unwrap()).unwrap();
        let dst = store(2, &[("a", &[3, 4]), ("b", &[6])]);
        let before = dst.get("a").unwrap().var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let err = apply(&dst, &archive).unwrap_err().to_string();
        assert!(err.contains('b'), "{err}");
        let after = dst.get("a").unwrap().var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let src = store(1, &[("a", &[8])]);
        let mut bytes = encode(&src, &ArchiveMeta::default()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Integrity(_))));
    }
}
