//! `vvol`: a directory holding `header.json` and `data.raw` (little-endian
//! float32 in C order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::volume::Volume;

pub const HEADER_FILE: &str = "header.json";
pub const DATA_FILE: &str = "data.raw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VvolHeader {
    pub shape: [usize; 3],
    pub voxel_size_mm: [f32; 3],
    pub dtype: String,
    pub order: String,
}

pub fn read(dir: &Path) -> Result<Volume> {
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VvolHeader = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", header_path.display())))?;
    if header.dtype != "f32le" {
        return Err(Error::MalformedHeader(format!("unsupported vvol dtype '{}'", header.dtype)));
    }
    if header.order != "C" {
        return Err(Error::MalformedHeader(format!("unsupported vvol order '{}'", header.order)));
    }
    let [d, h, w] = header.shape;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n = d * h * w;
    if bytes.len() != n * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected {} for shape {:?}",
            data_path.display(),
            bytes.len(),
            n * 4,
            header.shape
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::from_vec((d, h, w), values, header.voxel_size_mm)
}

pub fn write(v: &Volume, dir: &Path) -> Result<()> {
    let (d, h, w) = v.shape();
    let header = VvolHeader {
        shape: [d, h, w],
        voxel_size_mm: v.voxel_size_mm(),
        dtype: "f32le".into(),
        order: "C".into(),
    };
    let staged = fsutil::staging_dir(dir)?;
    let mut raw = Vec::with_capacity(v.len() * 4);
    for x in v.as_slice() {
        raw.extend_from_slice(&x.to_le_bytes());
    }
    let data_path = staged.path().join(DATA_FILE);
    fs::write(&data_path, raw).map_err(|e| Error::io(&data_path, e))?;
    let header_path = staged.path().join(HEADER_FILE);
    fs::write(&header_path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&header_path, e))?;
    fsutil::replace_dir(&staged.keep(), dir)
}
