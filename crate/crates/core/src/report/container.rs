//! Binary tensor container shared by checkpoints and feature stores.
//!
//! Layout: magic `ADDA`, `u32` format version, `u64` header length, a JSON
//! header, then raw little-endian tensor payloads. The header lists every
//! tensor with its dtype, shape and byte range relative to the payload start.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::real::{Precision, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADDA";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a tensor container (bad magic bytes)")]
    BadMagic,
    #[error("unsupported container version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated container: needs {needed} bytes, file has {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("spec digest mismatch for `{instance}`: expected {expected}, stored {found}")]
    DigestMismatch {
        instance: String,
        expected: String,
        found: String,
    },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Precision,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded container: header plus the raw payload bytes.
#[derive(Debug, Clone)]
pub struct Container {
    pub header: Header,
    payload: Vec<u8>,
}

/// Tensors to be written, each already encoded little-endian.
#[derive(Debug, Default)]
pub struct ContainerWriter {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl ContainerWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let offset = self.payload.len() as u64;
        for &x in t.data() {
            x.write_le(&mut self.payload);
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            dtype: T::PRECISION,
            shape: t.shape().to_vec(),
            offset,
            length: self.payload.len() as u64 - offset,
        });
    }

    pub fn to_bytes(&self, kind: &str, metadata: serde_json::Value) -> Vec<u8> {
        let header = Header {
            kind: kind.to_string(),
            metadata,
            tensors: self.entries.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write(
        &self,
        path: &Path,
        kind: &str,
        metadata: serde_json::Value,
    ) -> Result<(), ContainerError> {
        write_atomic(path, &self.to_bytes(kind, metadata))
    }
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let io = |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

impl Container {
    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(mut bytes: Vec<u8>) -> Result<Self, ContainerError> {
        let actual = bytes.len() as u64;
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(if bytes.len() < 4 && MAGIC.starts_with(&bytes) {
                ContainerError::Truncated {
                    needed: PREAMBLE as u64,
                    actual,
                }
            } else {
                ContainerError::BadMagic
            });
        }
        if bytes.len() < PREAMBLE {
            return Err(ContainerError::Truncated {
                needed: PREAMBLE as u64,
                actual,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion { found: version });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = (PREAMBLE as u64).saturating_add(header_len);
        if payload_start > actual {
            return Err(ContainerError::Truncated {
                needed: payload_start,
                actual,
            });
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start as usize])
            .map_err(|e| ContainerError::Malformed(format!("header: {e}")))?;
        let mut needed = payload_start;
        for t in &header.tensors {
            let count: usize = t.shape.iter().product();
            if (count * t.dtype.byte_width()) as u64 != t.length {
                return Err(ContainerError::Malformed(format!(
                    "tensor `{}` length disagrees with its shape",
                    t.name
                )));
            }
            needed = needed.max(payload_start + t.offset + t.length);
        }
        if needed > actual {
            return Err(ContainerError::Truncated { needed, actual });
        }
        let payload = bytes.split_off(payload_start as usize);
        Ok(Container { header, payload })
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.header.tensors.iter().find(|t| t.name == name)
    }

    /// Decodes a tensor, converting to `T` if stored at another precision.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>, ContainerError> {
        let e = self
            .entry(name)
            .ok_or_else(|| ContainerError::Malformed(format!("no tensor `{name}`")))?;
        let bytes = &self.payload[e.offset as usize..(e.offset + e.length) as usize];
        let data: Vec<T> = match e.dtype {
            Precision::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::c(f32::read_le(c) as f64))
                .collect(),
            Precision::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::c(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(e.shape.clone(), data).map_err(|err| ContainerError::Malformed(err.to_string()))
    }
}
