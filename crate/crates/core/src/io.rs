//! Tensor container files.
//!
//! Layout:
//!
//! ```text
//! offset 0   8 bytes   magic "RTEN0001"
//! offset 8   4 bytes   header length L, little-endian u32
//! offset 12  L bytes   UTF-8 JSON {"dtype":"f32"|"f64","shape":[..],"order":"rowmajor"}
//! offset 12+L          payload, little-endian, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RTEN0001";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        shape: t.shape().to_vec(),
        order: "rowmajor".to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + t.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn decode_payload<S: Real, T: Real>(bytes: &[u8], start: usize, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let need = n * S::BYTES;
    let avail = bytes.len() - start;
    if avail < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {avail}"),
        ));
    }
    if avail > need {
        return Err(format_err(start + need, format!("{} trailing bytes after payload", avail - need)));
    }
    let data = bytes[start..]
        .chunks_exact(S::BYTES)
        .map(|c| T::from_f64_lossy(S::read_le(c).to_f64_lossy()))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Decodes a container. An `f32` payload may be read into an `f64` tensor
/// (exact widening); the reverse is rejected.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 8 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if let Some(i) = (0..8).find(|&i| bytes[i] != MAGIC[i]) {
        return Err(format_err(i, "bad magic, expected \"RTEN0001\""));
    }
    if bytes.len() < 12 {
        return Err(format_err(bytes.len(), "truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: declared {hlen} bytes"),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| format_err(12 + e.column().saturating_sub(1), format!("invalid header json: {e}")))?;
    if header.order != "rowmajor" {
        return Err(format_err(12, format!("unsupported order {:?}", header.order)));
    }
    let start = 12 + hlen;
    match (header.dtype.as_str(), T::DTYPE) {
        ("f32", _) => decode_payload::<f32, T>(bytes, start, header.shape),
        ("f64", "f64") => decode_payload::<f64, T>(bytes, start, header.shape),
        ("f64", _) => Err(format_err(12, "f64 payload cannot be narrowed to f32")),
        (other, _) => Err(format_err(12, format!("unknown dtype {other:?}"))),
    }
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
