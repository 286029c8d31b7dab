// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight files: a JSON manifest next to a little-endian `f32` blob.
//!
//! `save(w, "run/model.json")` writes `run/model.json` and `run/model.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Weights};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Path of the blob that belongs to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes manifest and blob. Values are stored as `f32`.
pub fn save(w: &Weights, path: &Path) -> Result<()> {
    w.validate()?;
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(w.n_params() * 4);
    let mut tensors = Vec::new();
    let shapes = Weights::tensor_shapes(&w.config);
    let mut offset = 0;
    let mut i = 0;
    w.for_each_tensor(|name, data| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shapes[i].1.clone(),
            offset,
        });
        for &x in data {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        offset += data.len();
        i += 1;
    });
    let manifest = WeightsManifest {
        format_version: FORMAT_VERSION,
        config: w.config.clone(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads weights written by [`save`].
pub fn load(path: &Path) -> Result<Weights> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::ShapeMismatch("manifest has no format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnknownFormatVersion(version as u32));
    }
    let manifest: WeightsManifest = serde_json::from_value(value)?;
    manifest.config.validate()?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let expected = Weights::tensor_shapes(&manifest.config);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut total = 0;
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        if entry.offset + n > values.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name} needs values {}..{} but blob holds {}",
                entry.offset,
                entry.offset + n,
                values.len()
            )));
        }
        total += n;
    }
    if total != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "blob holds {} values, manifest declares {total}",
            values.len()
        )));
    }

    let mut w = Weights::zeros(manifest.config.clone());
    let mut i = 0;
    w.for_each_tensor_mut(|_, data| {
        let e = &manifest.tensors[i];
        let n = data.len();
        data.copy_from_slice(&values[e.offset..e.offset + n]);
        i += 1;
    });
    w.validate()?;
    Ok(w)
}
