//! Shared on-disk container: a magic line, one line of JSON header and a
//! little-endian binary payload holding the tensors listed in the header,
//! back to back in header order.
//!
//! ```text
//! ADVLAB <kind>\n
//! {"version":1,...,"tensors":[{"name":..,"dtype":..,"shape":[..]}],"payload_bytes":N}\n
//! <N bytes>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ADVLAB";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn elem_bytes(&self) -> Option<usize> {
        match self.dtype.as_str() {
            "f32" | "u32" => Some(4),
            "f64" => Some(8),
            _ => None,
        }
    }

    fn byte_len(&self) -> Option<usize> {
        Some(self.shape.iter().product::<usize>() * self.elem_bytes()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

/// In-memory container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    tensors: Vec<(TensorEntry, Vec<u8>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            seed,
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push_real<T: Real>(&mut self, name: impl Into<String>, a: &ArrayD<T>) {
        let mut bytes = Vec::with_capacity(a.len() * T::BYTES);
        for &v in a.as_standard_layout().iter() {
            v.write_le(&mut bytes);
        }
        self.tensors.push((
            TensorEntry {
                name: name.into(),
                dtype: T::DTYPE.into(),
                shape: a.shape().to_vec(),
            },
            bytes,
        ));
    }

    pub fn push_u32(&mut self, name: impl Into<String>, values: &[u32]) {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.tensors.push((
            TensorEntry {
                name: name.into(),
                dtype: "u32".into(),
                shape: vec![values.len()],
            },
            bytes,
        ));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|(e, _)| e.name == name).map(|(e, _)| e)
    }

    fn raw(&self, name: &str) -> Result<(&TensorEntry, &[u8])> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, b)| (e, b.as_slice()))
            .ok_or_else(|| Error::MissingTensor(name.into()))
    }

    /// Reads a floating tensor, converting between f32 and f64 if needed.
    pub fn real<T: Real>(&self, name: &str) -> Result<ArrayD<T>> {
        let (entry, bytes) = self.raw(name)?;
        let values: Vec<T> = match entry.dtype.as_str() {
            "f64" => bytes
                .chunks_exact(8)
                .map(|c| {
                    if T::BYTES == 8 {
                        T::read_le(c)
                    } else {
                        T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    }
                })
                .collect(),
            "f32" => bytes
                .chunks_exact(4)
                .map(|c| {
                    if T::BYTES == 4 {
                        T::read_le(c)
                    } else {
                        T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    }
                })
                .collect(),
            other => {
                return Err(Error::Config(format!(
                    "tensor `{name}` has dtype {other}, expected a floating type"
                )))
            }
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked on load"))
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        let (entry, bytes) = self.raw(name)?;
        if entry.dtype != "u32" {
            return Err(Error::Config(format!("tensor `{name}` has dtype {}, expected u32", entry.dtype)));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
            payload_bytes: self.tensors.iter().map(|(_, b)| b.len()).sum(),
        };
        let mut out = format!("{MAGIC} {}\n", self.kind).into_bytes();
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (_, b) in &self.tensors {
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing magic line".into()))?;
        let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("magic line is not UTF-8".into()))?;
        let kind_in_magic = magic
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(format!("unrecognized magic line `{magic}`")))?;
        let rest = &bytes[nl + 1..];
        let nl2 = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header line is not terminated".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl2]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        if header.kind != kind_in_magic {
            return Err(bad(format!(
                "magic line says `{kind_in_magic}` but header says `{}`",
                header.kind
            )));
        }
        let payload = &rest[nl2 + 1..];
        if payload.len() != header.payload_bytes {
            return Err(bad(format!(
                "header declares {} payload bytes, file holds {}",
                header.payload_bytes,
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let len = entry
                .byte_len()
                .ok_or_else(|| bad(format!("tensor `{}` has unknown dtype {}", entry.name, entry.dtype)))?;
            if offset + len > payload.len() {
                return Err(bad(format!("tensor `{}` runs past the payload", entry.name)));
            }
            tensors.push((entry, payload[offset..offset + len].to_vec()));
            offset += len;
        }
        if offset != payload.len() {
            return Err(bad(format!(
                "tensors cover {offset} of {} payload bytes",
                payload.len()
            )));
        }
        Ok(Self {
            kind: header.kind,
            seed: header.seed,
            config: header.config,
            tensors,
        })
    }

    /// Writes through a temporary file in the target directory and renames
    /// it into place, so readers never observe a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Loads and checks the container kind.
    pub fn load_kind(path: &Path, expected: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != expected {
            return Err(Error::CheckpointKind {
                found: c.kind,
                expected: expected.into(),
            });
        }
        Ok(c)
    }
}

/// Atomic replace of `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", Some(7), serde_json::json!({"a": 1}));
        c.push_real("x", &ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.1f64, -2.5, 3.0, 1e-300]).unwrap());
        c.push_u32("y", &[3, 1, 4]);
        c.push_real("h", &ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5f32, 0.25, -1.0]).unwrap());
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.real::<f64>("x").unwrap(), c.real::<f64>("x").unwrap());
        assert_eq!(back.u32s("y").unwrap(), vec![3, 1, 4]);
        assert_eq!(back.real::<f32>("h").unwrap()[[2]], -1.0);
        assert_eq!(back.real::<f64>("h").unwrap()[[1]], 0.25);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("\"version\":1", "\"version\":9");
        let err = Container::from_bytes(text.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
    }

    #[test]
    fn missing_tensor_is_named() {
        let c = sample();
        assert!(matches!(c.real::<f64>("nope"), Err(Error::MissingTensor(n)) if n == "nope"));
    }
}
