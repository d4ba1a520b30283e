use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use super::{
    element_count, io_err, CheckpointError, Dtype, Entry, Location, Result, Shard, TensorMap,
    TensorMeta, METADATA_KEY,
};

/// File-name suffix identifying a shard index inside a checkpoint directory.
pub const INDEX_SUFFIX: &str = ".index.json";

const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Opens a checkpoint. `path` may be a single container file, a shard index
/// file (`*.index.json`), or a directory holding exactly one shard index.
///
/// Only headers are read here; tensor bytes stay on disk until requested.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    if path.is_dir() {
        let index = find_index(path)?;
        return read_sharded(&index);
    }
    if path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(INDEX_SUFFIX))
    {
        return read_sharded(path);
    }
    let (metas, metadata, shard) = read_container(path)?;
    let mut map = TensorMap {
        metadata,
        ..TensorMap::default()
    };
    for meta in metas {
        let start = shard.data_start + meta.data_offsets.0;
        map.entries.insert(
            meta.name.clone(),
            Entry {
                meta,
                location: Location::File {
                    shard: shard.shard.clone(),
                    start,
                },
            },
        );
    }
    Ok(map)
}

struct OpenedShard {
    shard: Arc<Shard>,
    data_start: u64,
}

fn read_container(path: &Path) -> Result<(Vec<TensorMeta>, BTreeMap<String, String>, OpenedShard)> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let file_len = file.metadata().map_err(io_err(path))?.len();
    if file_len < 8 {
        return Err(CheckpointError::HeaderLength(format!(
            "file is {file_len} bytes, shorter than the 8-byte length prefix"
        )));
    }
    let mut prefix = [0u8; 8];
    file.read_exact(&mut prefix).map_err(io_err(path))?;
    let header_len = u64::from_le_bytes(prefix);
    if header_len > file_len - 8 {
        return Err(CheckpointError::HeaderLength(format!(
            "declared header length {header_len} exceeds the {} bytes after the prefix",
            file_len - 8
        )));
    }
    if header_len > MAX_HEADER_LEN {
        return Err(CheckpointError::HeaderLength(format!(
            "declared header length {header_len} exceeds the {MAX_HEADER_LEN}-byte limit"
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header).map_err(io_err(path))?;
    let data_len = file_len - 8 - header_len;
    let (metas, metadata) = parse_header(&header, data_len)?;
    Ok((
        metas,
        metadata,
        OpenedShard {
            shard: Arc::new(Shard {
                path: path.to_path_buf(),
                file,
            }),
            data_start: 8 + header_len,
        },
    ))
}

/// Parses and validates a header against a data region of `data_len` bytes.
pub(crate) fn parse_header(
    header: &[u8],
    data_len: u64,
) -> Result<(Vec<TensorMeta>, BTreeMap<String, String>)> {
    let text = std::str::from_utf8(header)
        .map_err(|e| CheckpointError::HeaderJson(format!("header is not UTF-8: {e}")))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| CheckpointError::HeaderJson(e.to_string()))?;
    let Value::Object(object) = value else {
        return Err(CheckpointError::HeaderJson(
            "header is not a JSON object".into(),
        ));
    };

    let mut metadata = BTreeMap::new();
    let mut metas = Vec::with_capacity(object.len());
    for (name, entry) in object {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(entry).map_err(|e| {
                CheckpointError::HeaderJson(format!("{METADATA_KEY} must map strings to strings: {e}"))
            })?;
            continue;
        }
        metas.push(parse_entry(name, entry)?);
    }
    check_offsets(&mut metas, data_len)?;
    Ok((metas, metadata))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

fn parse_entry(name: String, value: Value) -> Result<TensorMeta> {
    let raw: RawEntry = serde_json::from_value(value)
        .map_err(|e| CheckpointError::HeaderJson(format!("tensor {name:?}: {e}")))?;
    let dtype = Dtype::parse(&raw.dtype)?;
    let [begin, end] = raw.data_offsets;
    if end < begin {
        return Err(CheckpointError::Offsets(format!(
            "tensor {name:?} ends ({end}) before it begins ({begin})"
        )));
    }
    let expected = element_count(&raw.shape) as u64 * dtype.size() as u64;
    if end - begin != expected {
        return Err(CheckpointError::Offsets(format!(
            "tensor {name:?} spans {} bytes but shape {:?} x {dtype} needs {expected}",
            end - begin,
            raw.shape
        )));
    }
    Ok(TensorMeta {
        name,
        dtype,
        shape: raw.shape,
        data_offsets: (begin, end),
    })
}

/// Requires the tensors to tile `[0, data_len)` exactly, without gaps or overlap.
fn check_offsets(metas: &mut [TensorMeta], data_len: u64) -> Result<()> {
    metas.sort_by_key(|m| m.data_offsets);
    let mut cursor = 0u64;
    for meta in metas.iter() {
        let (begin, end) = meta.data_offsets;
        if end > data_len {
            return Err(CheckpointError::Offsets(format!(
                "tensor {:?} ends at {end}, past the {data_len}-byte data region",
                meta.name
            )));
        }
        if begin < cursor {
            return Err(CheckpointError::Offsets(format!(
                "tensor {:?} at {begin} overlaps data ending at {cursor}",
                meta.name
            )));
        }
        if begin > cursor {
            return Err(CheckpointError::Offsets(format!(
                "gap in data region between {cursor} and {begin}"
            )));
        }
        cursor = end;
    }
    if cursor != data_len {
        return Err(CheckpointError::Offsets(format!(
            "{} trailing bytes after the last tensor",
            data_len - cursor
        )));
    }
    Ok(())
}

fn find_index(dir: &Path) -> Result<PathBuf> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        if name.to_str().is_some_and(|n| n.ends_with(INDEX_SUFFIX)) {
            found.push(entry.path());
        }
    }
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => Err(CheckpointError::ShardIndex(format!(
            "no *{INDEX_SUFFIX} file in {}",
            dir.display()
        ))),
        n => Err(CheckpointError::ShardIndex(format!(
            "{n} index files in {}, expected one",
            dir.display()
        ))),
    }
}

#[derive(Deserialize)]
struct ShardIndex {
    weight_map: BTreeMap<String, String>,
    #[serde(default)]
    metadata: Option<Value>,
}

fn read_sharded(index_path: &Path) -> Result<TensorMap> {
    let text = std::fs::read_to_string(index_path).map_err(io_err(index_path))?;
    let index: ShardIndex =
        serde_json::from_str(&text).map_err(|e| CheckpointError::ShardIndex(e.to_string()))?;
    let dir = index_path.parent().unwrap_or_else(|| Path::new("."));

    let mut by_shard: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (tensor, shard) in &index.weight_map {
        if shard.contains('/') || shard.contains('\\') || shard == ".." {
            return Err(CheckpointError::ShardIndex(format!(
                "shard file name {shard:?} must be a plain file name"
            )));
        }
        by_shard.entry(shard).or_default().push(tensor);
    }

    let mut map = TensorMap::default();
    // String entries of the index's own metadata (other values, such as a
    // numeric total_size, are informational and dropped).
    if let Some(Value::Object(entries)) = &index.metadata {
        for (k, v) in entries {
            if let Value::String(v) = v {
                map.metadata.insert(k.clone(), v.clone());
            }
        }
    }
    for (shard_name, listed) in by_shard {
        let (metas, metadata, opened) = read_container(&dir.join(shard_name))?;
        for (k, v) in metadata {
            map.metadata.entry(k).or_insert(v);
        }
        let present: std::collections::BTreeSet<&str> =
            metas.iter().map(|m| m.name.as_str()).collect();
        if let Some(missing) = listed.iter().find(|t| !present.contains(**t)) {
            return Err(CheckpointError::ShardIndex(format!(
                "tensor {missing:?} mapped to {shard_name} but absent from it"
            )));
        }
        for meta in metas {
            match index.weight_map.get(&meta.name) {
                Some(s) if s == shard_name => {}
                _ => {
                    return Err(CheckpointError::ShardIndex(format!(
                        "tensor {:?} in {shard_name} is not mapped to that shard",
                        meta.name
                    )))
                }
            }
            let start = opened.data_start + meta.data_offsets.0;
            map.entries.insert(
                meta.name.clone(),
                Entry {
                    meta,
                    location: Location::File {
                        shard: opened.shard.clone(),
                        start,
                    },
                },
            );
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn hand_assembled_single_tensor() {
        // 1.0f32 = 0x3f800000, 2.0f32 = 0x40000000, little-endian.
        let header = r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let data = [0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40];
        let f = write_tmp(&container(header, &data));
        let map = read_checkpoint(f.path()).unwrap();
        assert_eq!(map.len(), 1);
        let meta = map.meta("w").unwrap();
        assert_eq!(meta.dtype, Dtype::F32);
        assert_eq!(meta.shape, vec![2]);
        assert_eq!(map.to_f32("w").unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn empty_header() {
        let f = write_tmp(&container("{}", &[]));
        assert!(read_checkpoint(f.path()).unwrap().is_empty());
    }

    #[test]
    fn header_length_past_eof() {
        let mut bytes = container("{}", &[]);
        bytes[..8].copy_from_slice(&1000u64.to_le_bytes());
        let f = write_tmp(&bytes);
        let err = read_checkpoint(f.path()).unwrap_err();
        assert!(err.to_string().contains("malformed header length"), "{err}");
    }

    #[test]
    fn truncated_prefix() {
        let f = write_tmp(&[1, 2, 3]);
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(CheckpointError::HeaderLength(_))
        ));
    }

    #[test]
    fn rejects_bad_json() {
        let f = write_tmp(&container("{\"w\":", &[]));
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(CheckpointError::HeaderJson(_))
        ));
    }

    #[test]
    fn rejects_overlap() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let f = write_tmp(&container(header, &[0; 8]));
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(CheckpointError::Offsets(_))
        ));
    }

    #[test]
    fn rejects_out_of_bounds() {
        let header = r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#;
        let f = write_tmp(&container(header, &[0; 8]));
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(CheckpointError::Offsets(_))
        ));
    }

    #[test]
    fn rejects_size_disagreeing_with_shape() {
        let header = r#"{"a":{"dtype":"F16","shape":[3],"data_offsets":[0,8]}}"#;
        let f = write_tmp(&container(header, &[0; 8]));
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(CheckpointError::Offsets(_))
        ));
    }

    #[test]
    fn rejects_unknown_dtype() {
        let header = r#"{"a":{"dtype":"F8_E4M3","shape":[1],"data_offsets":[0,1]}}"#;
        let f = write_tmp(&container(header, &[0]));
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(CheckpointError::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn keeps_metadata_and_padding() {
        let header = r#"{"__metadata__":{"format":"pt"},"a":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}}   "#;
        let f = write_tmp(&container(header, &[0x80, 0x3f]));
        let map = read_checkpoint(f.path()).unwrap();
        assert_eq!(map.metadata().get("format").map(String::as_str), Some("pt"));
        assert_eq!(map.to_f64("a").unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_sized_tensors_share_offsets() {
        let header = r#"{"e":{"dtype":"F32","shape":[0],"data_offsets":[0,0]},"f":{"dtype":"F32","shape":[2,0],"data_offsets":[0,0]},"g":{"dtype":"U8","shape":[1],"data_offsets":[0,1]}}"#;
        let f = write_tmp(&container(header, &[7]));
        let map = read_checkpoint(f.path()).unwrap();
        assert_eq!(map.len(), 3);
        assert!(map.bytes("e").unwrap().is_empty());
        assert_eq!(&*map.bytes("g").unwrap(), &[7]);
    }
}
