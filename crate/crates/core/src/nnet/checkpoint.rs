//! Model checkpoints: a directory holding one flat binary file per tensor
//! plus a JSON manifest with names, shapes, dtype, and the topology spec.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, TopologySpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: TopologySpec,
    dtype: String,
    in_channels: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn dtype_name<S: Scalar>() -> &'static str {
    if std::mem::size_of::<S>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Writes `dir/manifest.json` and one little-endian binary file per tensor.
pub fn save_checkpoint<S: Scalar>(
    dir: impl AsRef<Path>,
    spec: &TopologySpec,
    in_channels: usize,
    params: &ModelParams<S>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(t.data.len() * std::mem::size_of::<S>());
        for &v in &t.data {
            if std::mem::size_of::<S>() == 4 {
                bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            } else {
                bytes.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        fs::write(dir.join(&file), bytes)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            file,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        dtype: dtype_name::<S>().to_string(),
        in_channels,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a checkpoint back. The stored dtype may differ from `S`; values are
/// converted through f64.
pub fn load_checkpoint<S: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<(TopologySpec, usize, ModelParams<S>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.dtype != "f32" && manifest.dtype != "f64" {
        return Err(Error::Format(format!(
            "unknown checkpoint dtype {:?}",
            manifest.dtype
        )));
    }
    let elem = if manifest.dtype == "f32" { 4 } else { 8 };
    let mut params = ModelParams::new();
    for entry in &manifest.tensors {
        params.insert(&entry.name, entry.shape.clone())?;
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        let expect: usize = entry.shape.iter().product::<usize>() * elem;
        if bytes.len() != expect {
            return Err(Error::Format(format!(
                "{}: expected {expect} bytes for shape {:?}, found {}",
                path.display(),
                entry.shape,
                bytes.len()
            )));
        }
        let (_, t) = params.by_index_mut(params.len() - 1);
        for (dst, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(elem)) {
            let v = if elem == 4 {
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().unwrap())
            };
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "{}: non-finite parameter value",
                    path.display()
                )));
            }
            *dst = S::from_f64(v);
        }
    }
    Ok((manifest.spec, manifest.in_channels, params))
}
