//! The `FRZ1` binary container shared by network checkpoints, predictor
//! files and predictor datasets.
//!
//! Layout: magic `FRZ1`, `u32` LE version, `u32` LE header length, a UTF-8
//! JSON header, then the payload. Tensor payloads are raw little-endian f32
//! values placed at the offsets listed in the header's `tensors` index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{FrzError, Result};

pub const MAGIC: &[u8; 4] = b"FRZ1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Map<String, Value>,
    pub payload: Vec<u8>,
}

/// One entry of the tensor index: byte offset into the payload and shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut header = Map::new();
        header.insert("kind".into(), Value::String(kind.into()));
        Container { header, payload: Vec::new() }
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(Value::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(FrzError::Format(format!("expected container kind {kind:?}, found {other:?}"))),
        }
    }

    /// Appends a tensor to the payload and records it in the index.
    pub fn push_tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        let entry = TensorEntry { offset: self.payload.len(), shape: shape.to_vec() };
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        let index = self
            .header
            .entry("tensors")
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("tensor index is an object");
        index.insert(name.into(), serde_json::to_value(entry).expect("entry serialises"));
    }

    /// Tensor index in the stored order.
    pub fn tensor_index(&self) -> Result<Vec<(String, TensorEntry)>> {
        let Some(index) = self.header.get("tensors") else {
            return Ok(Vec::new());
        };
        let index = index.as_object().ok_or_else(|| FrzError::Format("tensor index is not an object".into()))?;
        index
            .iter()
            .map(|(k, v)| {
                serde_json::from_value(v.clone())
                    .map(|e| (k.clone(), e))
                    .map_err(|e| FrzError::Format(format!("bad tensor entry {k}: {e}")))
            })
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = self
            .tensor_index()?
            .into_iter()
            .find(|(k, _)| k == name)
            .map(|(_, e)| e)
            .ok_or_else(|| FrzError::Format(format!("tensor {name} missing from container")))?;
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        let bytes = self
            .payload
            .get(entry.offset..end)
            .ok_or_else(|| FrzError::Format(format!("tensor {name} extends past payload")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok((entry.shape, data))
    }

    pub fn header_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.header.get(key).ok_or_else(|| FrzError::Format(format!("header field {key} missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| FrzError::Format(format!("header field {key}: {e}")))
    }

    pub fn set_field<T: Serialize>(&mut self, key: &str, value: &T) {
        self.header.insert(key.into(), serde_json::to_value(value).expect("header value serialises"));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a container; the tensor index, if any, must exactly cover the
    /// payload so truncated files are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(FrzError::Format("file shorter than container preamble".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(FrzError::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(FrzError::Format(format!("unsupported container version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| FrzError::Format("header truncated".into()))?;
        let header: Value = serde_json::from_slice(header_bytes).map_err(|e| FrzError::Format(format!("header is not JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(FrzError::Format("header is not a JSON object".into()));
        };
        let c = Container { header, payload: bytes[12 + hlen..].to_vec() };
        let index = c.tensor_index()?;
        if !index.is_empty() {
            let needed = index
                .iter()
                .map(|(_, e)| e.offset + 4 * e.shape.iter().product::<usize>())
                .max()
                .unwrap_or(0);
            if needed != c.payload.len() {
                return Err(FrzError::Format(format!(
                    "payload holds {} bytes, tensor index needs {needed}",
                    c.payload.len()
                )));
            }
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Container::from_bytes(&fs::read(path)?)
    }
}
