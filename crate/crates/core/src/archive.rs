//! NMODSTAT tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                             |
//! |------------------|-----------------------------------------------------|
//! | `0..8`           | magic `NMODSTAT`                                    |
//! | `8..12`          | `u32` format version (currently 1)                  |
//! | `12..20`         | `u64` header length `H` in bytes                    |
//! | `20..20+H`       | UTF-8 JSON header                                   |
//! | up to `P`        | zero padding, `P` is the next multiple of 64        |
//! | `P..`            | payload; each tensor starts at a 64-byte boundary   |
//!
//! The header is `{"tensors": [{name, dtype, shape, offset, length}], "metadata": {...}}`
//! where `offset` is relative to `P` and `length` is in bytes. Tensors are stored
//! row-major as raw IEEE-754 (`f32`, `f64`) or two's complement (`i64`) values.

use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 8] = b"NMODSTAT";
pub const VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::I64 => TensorData::I64(
                bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        t.check_shape()?;
        Ok(t)
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, TensorData::F64(data))
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Self::new(name, shape, TensorData::I64(data))
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn check_shape(&self) -> Result<()> {
        ensure!(
            self.numel() == self.data.len(),
            Validation,
            "tensor '{}': shape {:?} needs {} elements, data has {}",
            self.name,
            self.shape,
            self.numel(),
            self.data.len()
        );
        Ok(())
    }

    /// Values widened to f64. Integer tensors are converted exactly up to 2^53.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            other => Err(Error::Format(format!(
                "tensor '{}' has dtype {:?}, expected i64",
                self.name,
                other.dtype()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

impl ArchiveHeader {
    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(self.tensors.len());
        for e in &self.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name '{}'", e.name)));
            }
            let numel: usize = e.shape.iter().product();
            ensure!(
                (numel * e.dtype.size()) as u64 == e.length,
                Format,
                "tensor '{}': length {} does not match shape {:?} of {:?}",
                e.name,
                e.length,
                e.shape,
                e.dtype
            );
            ensure!(
                e.offset % ALIGNMENT as u64 == 0,
                Format,
                "tensor '{}': offset {} is not {ALIGNMENT}-byte aligned",
                e.name,
                e.offset
            );
            spans.push((e.offset, e.offset + e.length, &e.name));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            ensure!(
                w[0].1 <= w[1].0,
                Format,
                "tensors '{}' and '{}' overlap",
                w[0].2,
                w[1].2
            );
        }
        Ok(())
    }

    /// Bytes of payload the header requires.
    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(|e| e.offset + e.length).max().unwrap_or(0)
    }
}

/// A set of named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub metadata: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_metadata(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.metadata.insert(key.to_owned(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("archive has no tensor '{name}'")))
    }

    /// Deserializes a metadata entry.
    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("archive metadata has no '{key}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn validate_for_write(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tensors {
            ensure!(
                names.insert(t.name.as_str()),
                Validation,
                "duplicate tensor name '{}'",
                t.name
            );
            t.check_shape()?;
            let bad = match &t.data {
                TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
                TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
                TensorData::I64(_) => None,
            };
            if let Some(i) = bad {
                return Err(Error::Validation(format!(
                    "tensor '{}' has a non-finite value at element {i}",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate_for_write()?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            offset = align_up(offset);
            let length = t.numel() * t.data.dtype().size();
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                offset: offset as u64,
                length: length as u64,
            });
            offset += length;
        }
        let header = ArchiveHeader {
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;

        let payload_start = align_up(PREAMBLE + header_json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (t, e) in self.tensors.iter().zip(&header.tensors) {
            out.resize(payload_start + e.offset as usize, 0);
            t.data.write_le(&mut out);
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload_start) = parse_preamble(bytes)?;
        let payload = &bytes[payload_start.min(bytes.len())..];
        ensure!(
            payload.len() as u64 >= header.payload_len(),
            Corrupt,
            "payload is {} bytes, header requires {}",
            payload.len(),
            header.payload_len()
        );
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let span = &payload[e.offset as usize..(e.offset + e.length) as usize];
                Tensor::new(e.name.clone(), e.shape.clone(), TensorData::read_le(e.dtype, span))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_preamble(bytes: &[u8]) -> Result<(ArchiveHeader, usize)> {
    ensure!(bytes.len() >= PREAMBLE, Format, "file too short for an NMODSTAT preamble");
    ensure!(&bytes[..8] == MAGIC, Format, "bad magic {:?}", String::from_utf8_lossy(&bytes[..8]));
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    ensure!(version == VERSION, Format, "unsupported NMODSTAT version {version}");
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    ensure!(
        bytes.len() >= PREAMBLE + header_len,
        Corrupt,
        "header declares {header_len} bytes but file has {}",
        bytes.len() - PREAMBLE
    );
    let header: ArchiveHeader = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + header_len])
        .map_err(|e| Error::Format(format!("invalid header JSON: {e}")))?;
    header.validate()?;
    Ok((header, align_up(PREAMBLE + header_len)))
}

/// Reads only the preamble and header, leaving the payload on disk.
pub fn read_header(path: impl AsRef<Path>) -> Result<ArchiveHeader> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pre = [0u8; PREAMBLE];
    f.read_exact(&mut pre).map_err(|_| {
        Error::Format(format!("{}: file too short for an NMODSTAT preamble", path.display()))
    })?;
    ensure!(&pre[..8] == MAGIC, Format, "{}: bad magic", path.display());
    let header_len = u64::from_le_bytes(pre[12..20].try_into().unwrap()) as usize;
    let mut buf = pre.to_vec();
    buf.resize(PREAMBLE + header_len, 0);
    f.read_exact(&mut buf[PREAMBLE..])
        .map_err(|_| Error::Corrupt(format!("{}: truncated header", path.display())))?;
    parse_preamble(&buf).map(|(h, _)| h)
}

pub fn write_archive(tensors: Vec<Tensor>, path: impl AsRef<Path>) -> Result<()> {
    Archive {
        metadata: Map::new(),
        tensors,
    }
    .write(path)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    Archive::read(path).map(|a| a.tensors)
}
