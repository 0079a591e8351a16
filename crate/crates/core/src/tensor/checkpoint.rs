//! Checkpoint format: `<stem>.json` lists every parameter's name, shape and
//! byte offset into `<stem>.bin`, a flat little-endian f64 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub blob: String,
    pub params: Vec<CheckpointEntry>,
}

const FORMAT: &str = "f64-le/v1";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Encodes a store into its manifest and blob without touching disk.
pub(crate) fn encode(store: &ParamStore, blob_name: &str) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.count() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        blob: blob_name.to_string(),
        params,
    };
    (manifest, blob)
}

pub(crate) fn decode(manifest: &CheckpointManifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.format != FORMAT {
        return Err(Error::contract(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        if e.bytes != n * 8 || e.offset + e.bytes > blob.len() {
            return Err(Error::contract(format!(
                "checkpoint entry {} does not fit the blob",
                e.name
            )));
        }
        let data = blob[e.offset..e.offset + e.bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(store)
}

/// Writes `<stem>.json` and `<stem>.bin`. Returns the blob size in bytes.
pub fn save_checkpoint(store: &ParamStore, stem: &Path) -> Result<usize> {
    let (json_path, bin_path) = paths(stem);
    let blob_name = bin_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, blob) = encode(store, &blob_name);
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(blob.len())
}

pub fn load_checkpoint(stem: &Path) -> Result<ParamStore> {
    let (json_path, _) = paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let bin_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(vals.len());
            let mut store = ParamStore::new();
            store.insert("a", Tensor::new(vec![split], vals[..split].to_vec()).unwrap_or_else(|_| Tensor::zeros(&[0])));
            store.insert("b.w", Tensor::new(vec![vals.len() - split], vals[split..].to_vec()).unwrap());
            let (m, blob) = encode(&store, "x.bin");
            let back = decode(&m, &blob).unwrap();
            for ((_, x), (_, y)) in store.iter().zip(back.iter()) {
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
                prop_assert_eq!(x.shape(), y.shape());
            }
        }
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0]).unwrap());
        let stem = dir.path().join("model");
        let bytes = save_checkpoint(&store, &stem).unwrap();
        assert_eq!(bytes, 32);
        let back = load_checkpoint(&stem).unwrap();
        assert!(store.values_equal(&back));
        assert_eq!(back.get("w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }
}
