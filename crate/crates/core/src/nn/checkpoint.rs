//! Checkpoint archives: an uncompressed tar holding `manifest.json` and one
//! little-endian float32 blob per tensor, in C order.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::SrModel;
use super::params::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "voxsr-checkpoint";
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub val_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: CheckpointMeta,
}

fn blob_name(index: usize, name: &str) -> String {
    format!("tensors/{index:04}_{name}.bin")
}

/// Serialize to archive bytes.
pub fn encode(model: &SrModel<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let tensors = model.params().tensors();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: DTYPE.into(),
        config: *model.config(),
        tensors: tensors
            .iter()
            .enumerate()
            .map(|(i, t)| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                file: blob_name(i, &t.name),
            })
            .collect(),
        meta: meta.clone(),
    };
    let mut builder = tar::Builder::new(Vec::new());
    let mut append = |name: &str, bytes: &[u8]| -> Result<()> {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder
            .append_data(&mut header, name, bytes)
            .map_err(|e| Error::io(name, e))
    };
    append(MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
    for (entry, t) in manifest.tensors.iter().zip(tensors) {
        let mut blob = Vec::with_capacity(t.data.len() * 4);
        for x in &t.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        append(&entry.file, &blob)?;
    }
    builder.into_inner().map_err(|e| Error::io(MANIFEST, e))
}

pub fn decode(bytes: &[u8]) -> Result<(SrModel<f32>, CheckpointMeta)> {
    let malformed = |e: std::io::Error| Error::MalformedCheckpoint(e.to_string());
    let mut archive = tar::Archive::new(bytes);
    let mut files: HashMap<String, Vec<u8>> = HashMap::new();
    for entry in archive.entries().map_err(malformed)? {
        let mut entry = entry.map_err(malformed)?;
        let path = entry.path().map_err(malformed)?.to_string_lossy().into_owned();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf).map_err(malformed)?;
        files.insert(path, buf);
    }
    let manifest_bytes = files
        .get(MANIFEST)
        .ok_or_else(|| Error::MalformedCheckpoint("archive has no manifest.json".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| Error::MalformedCheckpoint(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::MalformedCheckpoint(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::MalformedCheckpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut store = ParamStore::<f32>::new();
    for entry in &manifest.tensors {
        let blob = files
            .get(&entry.file)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor {} has no payload {}", entry.name, entry.file)))?;
        let n: usize = entry.shape.iter().product();
        if blob.len() != n * 4 {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor {} payload is {} bytes, shape {:?} needs {}",
                entry.name,
                blob.len(),
                entry.shape,
                n * 4
            )));
        }
        let id = store.add(entry.name.clone(), &entry.shape);
        for (dst, c) in store.data_mut(id).iter_mut().zip(blob.chunks_exact(4)) {
            *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    if !store.is_finite() {
        return Err(Error::MalformedCheckpoint("checkpoint holds non-finite parameters".into()));
    }
    let model = SrModel::from_params(manifest.config, store)?;
    Ok((model, manifest.meta))
}

pub fn save_checkpoint(model: &SrModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with_meta(model, &CheckpointMeta::default(), path)
}

pub fn save_checkpoint_with_meta(model: &SrModel<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &encode(model, meta)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SrModel<f32>> {
    load_checkpoint_with_meta(path).map(|(m, _)| m)
}

pub fn load_checkpoint_with_meta(path: impl AsRef<Path>) -> Result<(SrModel<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Tensors of a checkpoint compared bit for bit.
pub fn bitwise_equal(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.name == y.name
                && x.shape == y.shape
                && x.data.iter().map(|v| v.to_bits()).eq(y.data.iter().map(|v| v.to_bits()))
        })
}
