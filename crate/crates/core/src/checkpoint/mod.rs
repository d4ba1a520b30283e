//! Checkpoint containers: named dense tensors stored in a header-prefixed
//! binary layout (8-byte little-endian header length, JSON header, raw data).
//!
//! A [`TensorMap`] parsed from disk keeps only the header resident; tensor
//! bytes are fetched with positioned reads on demand, so a single map can be
//! shared between worker threads and a merge never needs the whole file in
//! memory.

mod reader;
mod writer;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use half::{bf16, f16};
use sha2::{Digest, Sha256};

pub use reader::{read_checkpoint, INDEX_SUFFIX};
pub use writer::{write_checkpoint, write_sharded_checkpoint, CheckpointWriter, TensorSpec};

/// Key reserved in the header for free-form string metadata.
pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header length: {0}")]
    HeaderLength(String),
    #[error("header JSON parse failure: {0}")]
    HeaderJson(String),
    #[error("invalid offsets: {0}")]
    Offsets(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("tensor {name:?}: byte length {actual} disagrees with shape {shape:?} x {dtype} ({expected} bytes)")]
    ByteLength {
        name: String,
        dtype: Dtype,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("tensor {0:?} is not a floating-point tensor")]
    NotFloating(String),
    #[error("shard index: {0}")]
    ShardIndex(String),
    #[error("writer: {0}")]
    Writer(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Element type of a stored tensor.
///
/// Only `F32`, `F16` and `BF16` take part in averaging. Integer and boolean
/// tensors are carried through so that checkpoints holding index buffers can
/// still be read; the merge engine copies them verbatim when identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    F32,
    F16,
    BF16,
    I8,
    I16,
    I32,
    I64,
    U8,
    U16,
    U32,
    U64,
    Bool,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 | Dtype::U32 => 4,
            Dtype::F16 | Dtype::BF16 | Dtype::I16 | Dtype::U16 => 2,
            Dtype::I64 | Dtype::U64 => 8,
            Dtype::I8 | Dtype::U8 | Dtype::Bool => 1,
        }
    }

    pub fn is_floating(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F16 | Dtype::BF16)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::I8 => "I8",
            Dtype::I16 => "I16",
            Dtype::I32 => "I32",
            Dtype::I64 => "I64",
            Dtype::U8 => "U8",
            Dtype::U16 => "U16",
            Dtype::U32 => "U32",
            Dtype::U64 => "U64",
            Dtype::Bool => "BOOL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "I8" => Dtype::I8,
            "I16" => Dtype::I16,
            "I32" => Dtype::I32,
            "I64" => Dtype::I64,
            "U8" => Dtype::U8,
            "U16" => Dtype::U16,
            "U32" => Dtype::U32,
            "U64" => Dtype::U64,
            "BOOL" => Dtype::Bool,
            other => return Err(CheckpointError::UnsupportedDtype(other.to_string())),
        })
    }

    /// Decodes little-endian floating bytes into `f64`.
    pub fn decode_f64(self, bytes: &[u8], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Dtype::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
            ),
            Dtype::F16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64()),
            ),
            Dtype::BF16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64()),
            ),
            _ => unreachable!("decode_f64 on non-floating dtype {self}"),
        }
    }

    /// Rounds each value once to this dtype and appends the little-endian bytes.
    pub fn encode_f64(self, values: &[f64], out: &mut Vec<u8>) {
        out.reserve(values.len() * self.size());
        match self {
            Dtype::F32 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&f16::from_f64(v).to_le_bytes())),
            Dtype::BF16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&bf16::from_f64(v).to_le_bytes())),
            _ => unreachable!("encode_f64 on non-floating dtype {self}"),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Header entry for one tensor. `data_offsets` are relative to the start of
/// the data region of the container file that holds the tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn element_count(&self) -> usize {
        element_count(&self.shape)
    }

    pub fn byte_len(&self) -> usize {
        self.element_count() * self.dtype.size()
    }
}

#[derive(Debug)]
pub(crate) struct Shard {
    path: PathBuf,
    file: File,
}

impl Shard {
    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
        #[cfg(unix)]
        {
            use std::os::unix::fs::FileExt;
            self.file.read_exact_at(buf, offset)
        }
        #[cfg(windows)]
        {
            use std::os::windows::fs::FileExt;
            let mut done = 0;
            while done < buf.len() {
                let n = self.file.seek_read(&mut buf[done..], offset + done as u64)?;
                if n == 0 {
                    return Err(std::io::ErrorKind::UnexpectedEof.into());
                }
                done += n;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone)]
enum Location {
    Memory(Arc<Vec<u8>>),
    File { shard: Arc<Shard>, start: u64 },
}

#[derive(Debug, Clone)]
struct Entry {
    meta: TensorMeta,
    location: Location,
}

/// One checkpoint: an ordered map from tensor name to metadata plus an
/// accessor for the raw bytes. Immutable once built; `Send + Sync`.
#[derive(Debug, Clone, Default)]
pub struct TensorMap {
    entries: BTreeMap<String, Entry>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn builder() -> TensorMapBuilder {
        TensorMapBuilder::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn metas(&self) -> impl Iterator<Item = &TensorMeta> {
        self.entries.values().map(|e| &e.meta)
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.entries.get(name).map(|e| &e.meta)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Raw little-endian bytes of one tensor. File-backed tensors are read
    /// with a single positioned read of exactly the tensor's extent.
    pub fn bytes(&self, name: &str) -> Result<Cow<'_, [u8]>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.to_string()))?;
        match &entry.location {
            Location::Memory(data) => Ok(Cow::Borrowed(data.as_slice())),
            Location::File { shard, start } => {
                let mut buf = vec![0u8; entry.meta.byte_len()];
                shard
                    .read_exact_at(&mut buf, *start)
                    .map_err(io_err(&shard.path))?;
                Ok(Cow::Owned(buf))
            }
        }
    }

    /// Decodes a floating tensor to `f64`.
    pub fn to_f64(&self, name: &str) -> Result<Vec<f64>> {
        let meta = self
            .meta(name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.to_string()))?;
        if !meta.dtype.is_floating() {
            return Err(CheckpointError::NotFloating(name.to_string()));
        }
        let mut out = Vec::with_capacity(meta.element_count());
        meta.dtype.decode_f64(&self.bytes(name)?, &mut out);
        Ok(out)
    }

    pub fn to_f32(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.to_f64(name)?.into_iter().map(|v| v as f32).collect())
    }

    /// SHA-256 over the canonical serialization of names, dtypes, shapes and
    /// data, visiting tensors one at a time in name order.
    pub fn content_hash(&self) -> Result<[u8; 32]> {
        let mut hasher = Sha256::new();
        for (name, entry) in &self.entries {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update(entry.meta.dtype.as_str().as_bytes());
            hasher.update((entry.meta.shape.len() as u64).to_le_bytes());
            for &d in &entry.meta.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            hasher.update(self.bytes(name)?);
        }
        Ok(hasher.finalize().into())
    }

    pub fn content_hash_hex(&self) -> Result<String> {
        Ok(hex(&self.content_hash()?))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Assembles an in-memory [`TensorMap`]. Data offsets are assigned on
/// `finish` in lexicographic name order, matching the on-disk layout.
#[derive(Debug, Default)]
pub struct TensorMapBuilder {
    tensors: BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>,
    metadata: BTreeMap<String, String>,
}

impl TensorMapBuilder {
    pub fn insert_bytes(
        &mut self,
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        bytes: Vec<u8>,
    ) -> Result<&mut Self> {
        let name = name.into();
        let expected = element_count(&shape) * dtype.size();
        if bytes.len() != expected {
            return Err(CheckpointError::ByteLength {
                name,
                dtype,
                shape,
                expected,
                actual: bytes.len(),
            });
        }
        if name == METADATA_KEY || self.tensors.contains_key(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        self.tensors.insert(name, (dtype, shape, bytes));
        Ok(self)
    }

    /// Encodes `values` (rounded once) as `dtype`, which must be floating.
    pub fn insert_f64(
        &mut self,
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        values: &[f64],
    ) -> Result<&mut Self> {
        let name = name.into();
        if !dtype.is_floating() {
            return Err(CheckpointError::NotFloating(name));
        }
        let mut bytes = Vec::new();
        dtype.encode_f64(values, &mut bytes);
        self.insert_bytes(name, dtype, shape, bytes)
    }

    pub fn insert_f32(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: &[f32],
    ) -> Result<&mut Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.insert_bytes(name, Dtype::F32, shape, bytes)
    }

    pub fn metadata(&mut self, key: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn finish(self) -> TensorMap {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .into_iter()
            .map(|(name, (dtype, shape, bytes))| {
                let end = offset + bytes.len() as u64;
                let meta = TensorMeta {
                    name: name.clone(),
                    dtype,
                    shape,
                    data_offsets: (offset, end),
                };
                offset = end;
                (
                    name,
                    Entry {
                        meta,
                        location: Location::Memory(Arc::new(bytes)),
                    },
                )
            })
            .collect();
        TensorMap {
            entries,
            metadata: self.metadata,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MismatchReason {
    MissingInSome,
    ShapeMismatch,
    DtypeMismatch,
}

impl fmt::Display for MismatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchReason::MissingInSome => "missing_in_some",
            MismatchReason::ShapeMismatch => "shape_mismatch",
            MismatchReason::DtypeMismatch => "dtype_mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatReport {
    pub compatible: bool,
    /// Sorted by tensor name, then reason.
    pub mismatches: Vec<(String, MismatchReason)>,
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible {
            return f.write_str("compatible");
        }
        for (i, (name, reason)) in self.mismatches.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{name}: {reason}")?;
        }
        Ok(())
    }
}

/// Checks that all maps share one name set and per-name shape and dtype.
pub fn validate_compatibility(maps: &[&TensorMap]) -> CompatReport {
    let mut mismatches = Vec::new();
    let mut all_names: Vec<&str> = maps.iter().flat_map(|m| m.names()).collect();
    all_names.sort_unstable();
    all_names.dedup();
    for name in all_names {
        let metas: Vec<Option<&TensorMeta>> = maps.iter().map(|m| m.meta(name)).collect();
        if metas.iter().any(Option::is_none) {
            mismatches.push((name.to_string(), MismatchReason::MissingInSome));
            continue;
        }
        let present: Vec<&TensorMeta> = metas.into_iter().flatten().collect();
        let first = present[0];
        if present.iter().any(|m| m.shape != first.shape) {
            mismatches.push((name.to_string(), MismatchReason::ShapeMismatch));
        }
        if present.iter().any(|m| m.dtype != first.dtype) {
            mismatches.push((name.to_string(), MismatchReason::DtypeMismatch));
        }
    }
    CompatReport {
        compatible: mismatches.is_empty(),
        mismatches,
    }
}
