//! `NNC1` checkpoint files.
//!
//! Layout: the magic `NNC1`, a `u32` version, a `u64` header length (both
//! little-endian), a UTF-8 JSON header, then the raw little-endian payload.
//! Tensors sit back to back in directory order. An `e4m3` tensor stores its
//! codes followed by its block scales as `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::{block_grid, QuantMode, QuantizedBlockTensor, StoredTensor};
use crate::model::{Checkpoint, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNC1";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantInfo {
    pub mode: QuantMode,
    pub scales: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn elem_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        "e4m3" => Ok(1),
        other => Err(Error::Format(format!("unknown dtype `{other}`"))),
    }
}

fn expected_nbytes(e: &TensorEntry) -> Result<u64> {
    let n: usize = e.shape.iter().product();
    let body = n * elem_bytes(&e.dtype)?;
    let scales = match (&e.quant, e.dtype.as_str()) {
        (Some(q), "e4m3") => {
            let (gr, gc) = block_grid(&e.shape, q.mode);
            if q.scales != gr * gc {
                return Err(Error::Format(format!("`{}` declares {} scales, grid has {}", e.name, q.scales, gr * gc)));
            }
            8 * q.scales
        }
        (None, "e4m3") => return Err(Error::Format(format!("`{}` is e4m3 without block info", e.name))),
        (Some(_), _) => return Err(Error::Format(format!("`{}` has block info but dtype {}", e.name, e.dtype))),
        (None, _) => 0,
    };
    Ok((body + scales) as u64)
}

/// Serializes a mix of full-precision and E4M3 tensors.
pub fn encode_stored<T: Scalar>(config: &ModelConfig, stored: &BTreeMap<String, StoredTensor<T>>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(stored.len());
    for (name, t) in stored {
        let offset = payload.len() as u64;
        let (dtype, quant) = match t {
            StoredTensor::Full(t) => {
                t.data().iter().for_each(|&x| x.write_le(&mut payload));
                (T::DTYPE, None)
            }
            StoredTensor::Fp8(q) => {
                q.validate()?;
                payload.extend_from_slice(&q.codes);
                q.scales.iter().for_each(|s| payload.extend_from_slice(&s.to_le_bytes()));
                (
                    "e4m3",
                    Some(QuantInfo {
                        mode: q.mode,
                        scales: q.scales.len(),
                    }),
                )
            }
        };
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: dtype.into(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
            quant,
        });
    }
    let header = serde_json::to_vec(&FileHeader {
        config: config.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let stored = ckpt
        .tensors()
        .iter()
        .map(|(k, t)| (k.clone(), StoredTensor::Full(t.clone())))
        .collect();
    encode_stored(ckpt.config(), &stored)
}

/// Parses and checks the header; returns it with the payload slice.
pub fn read_header(bytes: &[u8]) -> Result<(FileHeader, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Format("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    if header_len > rest.len() as u64 {
        return Err(Error::Format("truncated header".into()));
    }
    let (head, payload) = rest.split_at(header_len as usize);
    let header: FileHeader = serde_json::from_slice(head)?;
    let mut cursor = 0u64;
    for e in &header.tensors {
        let want = expected_nbytes(e)?;
        if e.nbytes != want {
            return Err(Error::Format(format!(
                "`{}`: shape {:?} needs {want} bytes, header says {}",
                e.name, e.shape, e.nbytes
            )));
        }
        if e.offset != cursor {
            return Err(Error::Format(format!("`{}` at offset {}, expected {cursor}", e.name, e.offset)));
        }
        cursor += e.nbytes;
    }
    match (payload.len() as u64).cmp(&cursor) {
        std::cmp::Ordering::Less => Err(Error::Format(format!(
            "truncated payload: {} bytes, directory needs {cursor}",
            payload.len()
        ))),
        std::cmp::Ordering::Greater => Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - cursor
        ))),
        std::cmp::Ordering::Equal => Ok((header, payload)),
    }
}

fn read_full<T: Scalar>(dtype: &str, raw: &[u8]) -> Vec<T> {
    match dtype {
        "f32" => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        _ => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    }
}

/// Full-precision tensors stored as another float width are converted on load.
pub fn decode_stored<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, BTreeMap<String, StoredTensor<T>>)> {
    let (header, payload) = read_header(bytes)?;
    let mut stored = BTreeMap::new();
    for e in header.tensors {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let t = match &e.quant {
            Some(q) => {
                let n: usize = e.shape.iter().product();
                let (codes, scales) = raw.split_at(n);
                let qt = QuantizedBlockTensor {
                    shape: e.shape.clone(),
                    mode: q.mode,
                    codes: codes.to_vec(),
                    scales: scales.chunks_exact(8).map(f64::read_le).collect(),
                };
                qt.validate()?;
                StoredTensor::Fp8(qt)
            }
            None => StoredTensor::Full(Tensor::new(e.shape.clone(), read_full(&e.dtype, raw))?),
        };
        if stored.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok((header.config, stored))
}

/// E4M3 tensors are dequantized.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (config, stored) = decode_stored(bytes)?;
    crate::fp8::materialize(config, &stored)
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(ckpt)?)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn save_stored<T: Scalar>(
    config: &ModelConfig,
    stored: &BTreeMap<String, StoredTensor<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    Ok(fs::write(path, encode_stored(config, stored)?)?)
}

pub fn load_stored<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, BTreeMap<String, StoredTensor<T>>)> {
    decode_stored(&fs::read(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<S: Serialize>(value: &S, path: impl AsRef<Path>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(fs::write(path, s)?)
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<D> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
