//! Dataset layout on disk: `train/` and `val/` PNG triplets plus a JSON
//! manifest, and a small binary format for embedding fields.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use embedseg_core::datagen::{png_io, synth_generate};
use embedseg_core::distfield::DistMap;
use embedseg_core::losses::EmbeddingField;
use embedseg_core::trainer::Scene;

use crate::config::SynthConfig;
use crate::errors::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: String,
    pub image: String,
    pub labels: String,
    pub mask: String,
    pub instances: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub scenes: Vec<SceneEntry>,
}

fn scene_split(cfg: &SynthConfig, index: usize) -> &'static str {
    if index < cfg.split().0 {
        "train"
    } else {
        "val"
    }
}

/// Generates the whole dataset in memory, already split.
pub fn generate_dataset(cfg: &SynthConfig) -> CliResult<(Vec<Scene>, Vec<Scene>)> {
    cfg.validate()?;
    let (train_count, _) = cfg.split();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for k in 0..cfg.scenes {
        let (image, labels, mask) = synth_generate(&cfg.scene_config(k))?;
        let scene = Scene::new(image, labels, mask)?;
        if k < train_count {
            train.push(scene);
        } else {
            val.push(scene);
        }
    }
    Ok((train, val))
}

/// Generates and writes the dataset under `dir`, returning the manifest it
/// also saved as `manifest.json`.
pub fn write_dataset(cfg: &SynthConfig, dir: &Path) -> CliResult<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir.join("train"))?;
    std::fs::create_dir_all(dir.join("val"))?;
    let mut entries = Vec::with_capacity(cfg.scenes);
    for k in 0..cfg.scenes {
        let (image, labels, mask) = synth_generate(&cfg.scene_config(k))?;
        let split = scene_split(cfg, k);
        let id = format!("scene_{k:04}");
        let rel = |suffix: &str| format!("{split}/{id}_{suffix}.png");
        png_io::save_image(&image, dir.join(rel("image")))?;
        png_io::save_label_map(&labels, dir.join(rel("labels")))?;
        png_io::save_mask(&mask, dir.join(rel("mask")))?;
        let (image_rel, labels_rel, mask_rel) = (rel("image"), rel("labels"), rel("mask"));
        entries.push(SceneEntry {
            id,
            split: split.to_string(),
            image: image_rel,
            labels: labels_rel,
            mask: mask_rel,
            instances: labels.num_instances(),
        });
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        scenes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a dataset written by `write_dataset`.
pub fn load_dataset(dir: &Path) -> CliResult<(Vec<Scene>, Vec<Scene>, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CliError::runtime(format!(
            "{} has no manifest.json (not a dataset directory?)",
            dir.display()
        )));
    }
    let manifest: DatasetManifest = {
        let text = std::fs::read_to_string(&manifest_path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::runtime(format!("broken manifest: {e}")))?
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for entry in &manifest.scenes {
        let image = png_io::load_image(dir.join(&entry.image))?;
        let (labels, _) = png_io::load_label_map(dir.join(&entry.labels))?;
        let mask = png_io::load_mask(dir.join(&entry.mask))?;
        let scene = Scene::new(image, labels, mask)?;
        match entry.split.as_str() {
            "train" => train.push(scene),
            "val" => val.push(scene),
            other => {
                return Err(CliError::runtime(format!(
                    "manifest entry {} has unknown split '{other}'",
                    entry.id
                )))
            }
        }
    }
    if train.is_empty() {
        return Err(CliError::runtime("dataset has no training scenes"));
    }
    Ok((train, val, manifest))
}

/// Raw raster file shared by embeddings and distance maps: height, width,
/// channel count as u32 LE, then f32 LE values in pixel-major order.
fn write_raster(path: &Path, h: usize, w: usize, dim: usize, values: &[f64]) -> CliResult<()> {
    let mut buf = Vec::with_capacity(12 + values.len() * 4);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_raster(path: &Path) -> CliResult<(usize, usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(CliError::runtime(format!("{} is too short", path.display())));
    }
    let dims: Vec<usize> = bytes[..12]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (h, w, dim) = (dims[0], dims[1], dims[2]);
    let expected = 12 + h * w * dim * 4;
    if bytes.len() != expected {
        return Err(CliError::runtime(format!(
            "{} has {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CliError::runtime(format!(
            "{} has non-finite values",
            path.display()
        )));
    }
    Ok((h, w, dim, data))
}

pub fn save_embeddings(emb: &EmbeddingField, path: &Path) -> CliResult<()> {
    write_raster(path, emb.height, emb.width, emb.dim, &emb.data)
}

pub fn load_embeddings(path: &Path) -> CliResult<EmbeddingField> {
    let (height, width, dim, data) = read_raster(path)?;
    Ok(EmbeddingField { height, width, dim, data })
}

pub fn save_distmap(dist: &DistMap, path: &Path) -> CliResult<()> {
    write_raster(path, dist.height, dist.width, 1, &dist.values)
}

pub fn load_distmap(path: &Path) -> CliResult<DistMap> {
    let (height, width, dim, values) = read_raster(path)?;
    if dim != 1 {
        return Err(CliError::runtime(format!(
            "{} has {dim} channels, a distance map has exactly 1",
            path.display()
        )));
    }
    Ok(DistMap { height, width, values })
}

/// `--out` wins; otherwise `$EMBEDSEG_OUT/<sub>`, defaulting the root to
/// `./out`.
pub fn resolve_out_dir(explicit: Option<PathBuf>, sub: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os("EMBEDSEG_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
            .join(sub)
    })
}
