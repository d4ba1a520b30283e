use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use tempfile::NamedTempFile;

use super::{element_count, io_err, CheckpointError, Dtype, Result, TensorMap, METADATA_KEY};

/// Name, dtype and shape of a tensor to be written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn byte_len(&self) -> u64 {
        (element_count(&self.shape) * self.dtype.size()) as u64
    }
}

/// Streams a container to disk one tensor at a time.
///
/// The header is fixed at creation, so tensors must be supplied in
/// lexicographic name order. Output goes to a temporary file in the
/// destination directory and is renamed into place by [`finish`]; dropping
/// the writer early leaves nothing behind.
///
/// [`finish`]: CheckpointWriter::finish
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<NamedTempFile>,
    pending: std::vec::IntoIter<TensorSpec>,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        specs: impl IntoIterator<Item = TensorSpec>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut specs: Vec<TensorSpec> = specs.into_iter().collect();
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = specs.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(CheckpointError::DuplicateName(w[0].name.clone()));
        }
        if specs.iter().any(|s| s.name == METADATA_KEY) {
            return Err(CheckpointError::DuplicateName(METADATA_KEY.into()));
        }
        let header = encode_header(&specs, metadata);

        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
        let mut out = BufWriter::new(tmp);
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header))
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            out,
            pending: specs.into_iter(),
        })
    }

    /// Appends the next tensor's raw bytes.
    pub fn write_tensor(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let spec = self.pending.next().ok_or_else(|| {
            CheckpointError::Writer(format!("tensor {name:?} written after the last declared tensor"))
        })?;
        if spec.name != name {
            return Err(CheckpointError::Writer(format!(
                "expected tensor {:?} next, got {name:?}",
                spec.name
            )));
        }
        let expected = spec.byte_len() as usize;
        if expected != bytes.len() {
            return Err(CheckpointError::ByteLength {
                name: spec.name,
                dtype: spec.dtype,
                expected,
                shape: spec.shape,
                actual: bytes.len(),
            });
        }
        self.out.write_all(bytes).map_err(io_err(&self.path))
    }

    /// Name of the tensor the writer expects next.
    pub fn next_name(&self) -> Option<&str> {
        self.pending.as_slice().first().map(|s| s.name.as_str())
    }

    pub fn finish(self) -> Result<()> {
        if let Some(spec) = self.pending.as_slice().first() {
            return Err(CheckpointError::Writer(format!(
                "finished before tensor {:?} was written",
                spec.name
            )));
        }
        let path = self.path;
        let tmp = self
            .out
            .into_inner()
            .map_err(|e| CheckpointError::Io {
                path: path.clone(),
                source: e.into_error(),
            })?;
        tmp.as_file().sync_all().map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| CheckpointError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(())
    }
}

/// Header JSON with keys in lexicographic order, space-padded to a multiple
/// of 8 bytes so the data region starts aligned.
fn encode_header(specs: &[TensorSpec], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut entries: BTreeMap<&str, Value> = BTreeMap::new();
    if !metadata.is_empty() {
        entries.insert(METADATA_KEY, json!(metadata));
    }
    let mut offset = 0u64;
    for spec in specs {
        let end = offset + spec.byte_len();
        entries.insert(
            &spec.name,
            json!({
                "dtype": spec.dtype.as_str(),
                "shape": spec.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut header = serde_json::to_vec(&entries).expect("header serializes");
    let padded = (header.len() + 8 + 7) / 8 * 8 - 8;
    header.resize(padded, b' ');
    header
}

fn specs_of<'a>(map: &'a TensorMap, names: impl Iterator<Item = &'a str>) -> Vec<TensorSpec> {
    names
        .map(|n| {
            let m = map.meta(n).expect("name from map");
            TensorSpec {
                name: m.name.clone(),
                dtype: m.dtype,
                shape: m.shape.clone(),
            }
        })
        .collect()
}

/// Writes `map` as one container file. Writes are atomic and deterministic.
pub fn write_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = CheckpointWriter::create(path, specs_of(map, map.names()), map.metadata())?;
    for name in map.names() {
        writer.write_tensor(name, &map.bytes(name)?)?;
    }
    writer.finish()
}

/// Writes `map` into `dir` as `n_shards` container files plus an index
/// `model{INDEX_SUFFIX}`. Tensors are dealt to shards in name order, in
/// contiguous runs of near-equal count.
pub fn write_sharded_checkpoint(
    map: &TensorMap,
    dir: impl AsRef<Path>,
    n_shards: usize,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if n_shards == 0 {
        return Err(CheckpointError::ShardIndex("shard count must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let names: Vec<&str> = map.names().collect();
    let per_shard = names.len().div_ceil(n_shards).max(1);
    let mut weight_map = BTreeMap::new();
    for i in 0..n_shards {
        let file_name = format!("model-{:05}-of-{:05}.safetensors", i + 1, n_shards);
        let chunk: &[&str] = names
            .get(i * per_shard..((i + 1) * per_shard).min(names.len()))
            .unwrap_or(&[]);
        let metadata = if i == 0 { map.metadata().clone() } else { BTreeMap::new() };
        let mut writer =
            CheckpointWriter::create(dir.join(&file_name), specs_of(map, chunk.iter().copied()), &metadata)?;
        for name in chunk {
            writer.write_tensor(name, &map.bytes(name)?)?;
            weight_map.insert(name.to_string(), file_name.clone());
        }
        writer.finish()?;
    }
    let index_path = dir.join(format!("model{}", super::INDEX_SUFFIX));
    let index = json!({ "metadata": map.metadata(), "weight_map": weight_map });
    let mut tmp = NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    serde_json::to_writer_pretty(&mut tmp, &index)
        .map_err(|e| CheckpointError::Writer(e.to_string()))?;
    tmp.persist(&index_path).map_err(|e| CheckpointError::Io {
        path: index_path.clone(),
        source: e.error,
    })?;
    Ok(index_path)
}
