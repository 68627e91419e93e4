//! Versioned binary container of named tensors.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "GVAETNSR"
//! version  u32
//! kind     u32 length + UTF-8
//! meta     u64 length + UTF-8 JSON
//! count    u32
//! entries  count x { u32 name length, name, u32 ndim, ndim x u64, f64 values }
//! ```
//!
//! A JSON manifest mirroring names and shapes is written next to the file
//! with `.json` appended.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GVAETNSR";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.kind.len() as u32).to_le_bytes());
    out.extend_from_slice(c.kind.as_bytes());
    out.extend_from_slice(&(c.meta.len() as u64).to_le_bytes());
    out.extend_from_slice(c.meta.as_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for e in &c.tensors {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String, NnError> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| NnError::Format("invalid UTF-8".into()))
    }
}

fn decode(buf: &[u8]) -> Result<Container, NnError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NnError::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind_len = r.u32()? as usize;
    let kind = r.string(kind_len)?;
    let meta_len = r.u64()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| NnError::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(TensorEntry {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != buf.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Container {
        kind,
        meta,
        tensors,
    })
}

/// Writes the container and its JSON manifest.
pub fn write_container(path: &Path, c: &Container) -> Result<(), NnError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(c))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: c.kind.clone(),
        meta: serde_json::from_str(&c.meta).unwrap_or(serde_json::Value::String(c.meta.clone())),
        tensors: c
            .tensors
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| NnError::Format(e.to_string()))?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

/// Reads a container. If a manifest sits next to the file, tensor names and
/// shapes must agree with it.
pub fn read_container(path: &Path) -> Result<Container, NnError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let c = decode(&buf)?;
    if let Ok(text) = fs::read_to_string(manifest_path(path)) {
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| NnError::Format(format!("manifest: {e}")))?;
        if m.version != FORMAT_VERSION {
            return Err(NnError::Format(format!("manifest version {}", m.version)));
        }
        let agrees = m.tensors.len() == c.tensors.len()
            && m.tensors
                .iter()
                .zip(&c.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.tensor.shape());
        if !agrees {
            return Err(NnError::Format(
                "tensor names or shapes disagree with manifest".into(),
            ));
        }
    }
    Ok(c)
}
