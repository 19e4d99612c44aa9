//! Keyed binary array container used for displacement fields and network
//! checkpoints.
//!
//! Layout: the magic bytes `ESHC`, a little-endian `u32` header length, a
//! JSON header describing metadata and every array (key, dtype, shape, byte
//! offset), then the raw little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"ESHC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
            ArrayData::U8(a) => a.shape(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(a) => a.iter().for_each(|v| v.write_le(out)),
            ArrayData::F64(a) => a.iter().for_each(|v| v.write_le(out)),
            ArrayData::U8(a) => out.extend(a.iter()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: BTreeMap<String, Value>,
    arrays: Vec<Entry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, Value>,
    arrays: BTreeMap<String, ArrayData>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, key: &str, data: ArrayData) {
        self.arrays.insert(key.to_string(), data);
    }

    pub fn insert_real<T: Real>(&mut self, key: &str, array: ArrayD<T>) {
        let data = match T::DTYPE {
            "f32" => ArrayData::F32(array.mapv(|v| v.to_f64_lossy() as f32)),
            _ => ArrayData::F64(array.mapv(|v| v.to_f64_lossy())),
        };
        self.insert(key, data);
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&ArrayData> {
        self.arrays.get(key)
    }

    /// Reads a floating-point array, converting between precisions.
    pub fn get_real<T: Real>(&self, key: &str) -> Result<ArrayD<T>> {
        match self.arrays.get(key) {
            Some(ArrayData::F32(a)) => Ok(a.mapv(|v| T::of(v as f64))),
            Some(ArrayData::F64(a)) => Ok(a.mapv(T::of)),
            Some(ArrayData::U8(_)) => Err(Error::InvalidArgument(format!(
                "array `{key}` is u8, expected floating point"
            ))),
            None => Err(Error::InvalidArgument(format!("container has no array `{key}`"))),
        }
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (key, data) in &self.arrays {
            entries.push(Entry {
                key: key.clone(),
                dtype: data.dtype().to_string(),
                shape: data.shape().to_vec(),
                offset: payload.len(),
            });
            data.write(&mut payload);
        }
        let header = Header {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing container magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8 + header_len;
        if bytes.len() < header_end {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[header_end..];
        let mut arrays = BTreeMap::new();
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let width = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                "u8" => 1,
                other => return Err(bad(format!("unknown dtype {other}"))),
            };
            let end = entry.offset + n * width;
            let raw = payload
                .get(entry.offset..end)
                .ok_or_else(|| bad(format!("array `{}` truncated", entry.key)))?;
            let shape = IxDyn(&entry.shape);
            let data = match width {
                4 => ArrayData::F32(
                    ArrayD::from_shape_vec(shape, raw.chunks_exact(4).map(f32::read_le).collect())
                        .map_err(|e| bad(e.to_string()))?,
                ),
                8 => ArrayData::F64(
                    ArrayD::from_shape_vec(shape, raw.chunks_exact(8).map(f64::read_le).collect())
                        .map_err(|e| bad(e.to_string()))?,
                ),
                _ => ArrayData::U8(
                    ArrayD::from_shape_vec(shape, raw.to_vec()).map_err(|e| bad(e.to_string()))?,
                ),
            };
            arrays.insert(entry.key, data);
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_mixed_dtypes() {
        let mut c = Container::new().with_meta("tag", "x");
        c.insert_real("a", array![[1.5f32, -2.0], [0.25, 3.0]].into_dyn());
        c.insert_real("b", array![1.0f64 / 3.0].into_dyn());
        c.insert("m", ArrayData::U8(array![[0u8, 1], [1, 0]].into_dyn()));
        let back = Container::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_real::<f64>("b").unwrap()[[0]], 1.0 / 3.0);
    }

    #[test]
    fn rejects_garbage() {
        let err = Container::from_bytes(b"nope", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
