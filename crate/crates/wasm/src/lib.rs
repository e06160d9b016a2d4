//! Browser-facing demo of the segmentation pipeline on synthetic scenes.
//!
//! Three interactive operations, all running on the real library code:
//! scene synthesis, distance-map regression targets with seed extraction,
//! and seeded angular clustering of noise-perturbed embeddings. Exported
//! methods stick to scalars, strings, and byte buffers so the page needs no
//! framework — each raster comes back as RGBA bytes ready for a canvas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use embedseg_core::clusterer::{angular_cluster, apply_foreground_mask, ClusterConfig};
use embedseg_core::datagen::{
    synth_generate, ForegroundMask, Image, LabelMap, SceneConfig, ShapeFamily,
};
use embedseg_core::distfield::{compute_distmap, extract_seeds, DistMap};
use embedseg_core::losses::EmbeddingField;
use embedseg_core::metrics::symmetric_best_dice;

/// Golden-angle hue rotation: well-separated colors for arbitrarily many
/// instance ids, background near-black.
fn id_color(id: u32) -> [u8; 3] {
    if id == 0 {
        return [24, 24, 28];
    }
    let h = (id as f64 * 137.508) % 360.0;
    hsv_to_rgb(h, 0.72, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 / 60 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Dark-blue-to-yellow ramp for the distance heatmap.
fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [20.0, 24.0, 60.0]),
        (0.35, [40.0, 90.0, 160.0]),
        (0.7, [60.0, 180.0, 140.0]),
        (1.0, [250.0, 230.0, 60.0]),
    ];
    for pair in stops.windows(2) {
        let (t0, c0) = pair[0];
        let (t1, c1) = pair[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [
                (c0[0] + f * (c1[0] - c0[0])) as u8,
                (c0[1] + f * (c1[1] - c0[1])) as u8,
                (c0[2] + f * (c1[2] - c0[2])) as u8,
            ];
        }
    }
    [250, 230, 60]
}

fn rgba_from(h: usize, w: usize, mut px: impl FnMut(usize, usize) -> [u8; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w * 4);
    for r in 0..h {
        for c in 0..w {
            let [red, green, blue] = px(r, c);
            out.extend_from_slice(&[red, green, blue, 255]);
        }
    }
    out
}

fn stamp_cross(buf: &mut [u8], h: usize, w: usize, row: usize, col: usize, color: [u8; 3]) {
    let mut put = |r: isize, c: isize| {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            let i = (r as usize * w + c as usize) * 4;
            buf[i] = color[0];
            buf[i + 1] = color[1];
            buf[i + 2] = color[2];
        }
    };
    for d in -1isize..=1 {
        put(row as isize + d, col as isize);
        put(row as isize, col as isize + d);
    }
}

/// One synthetic scene plus everything the page derives from it.
#[wasm_bindgen]
pub struct Demo {
    image: Image,
    labels: LabelMap,
    mask: ForegroundMask,
    dist: DistMap,
    clusters: Option<LabelMap>,
    last_sbd: f64,
    last_unassigned: usize,
}

#[wasm_bindgen]
impl Demo {
    /// Synthesizes a fresh scene and returns the demo handle.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, objects: u32, rosette: bool) -> Result<Demo, String> {
        let objects = objects.clamp(1, 9) as usize;
        let cfg = SceneConfig {
            height: 64,
            width: 64,
            channels: 1,
            min_objects: objects,
            max_objects: objects,
            family: if rosette { ShapeFamily::Rosette } else { ShapeFamily::Blobs },
            margin: 1.0,
            noise: 0.02,
            seed: seed as u64,
        };
        let (image, labels, mask) = synth_generate(&cfg).map_err(|e| e.to_string())?;
        let dist = compute_distmap(&labels);
        Ok(Demo {
            image,
            labels,
            mask,
            dist,
            clusters: None,
            last_sbd: 0.0,
            last_unassigned: 0,
        })
    }

    pub fn width(&self) -> u32 {
        self.image.width as u32
    }

    pub fn height(&self) -> u32 {
        self.image.height as u32
    }

    pub fn instances(&self) -> u32 {
        self.labels.num_instances()
    }

    /// Operation 1: the rendered scene, as RGBA bytes.
    pub fn render_image(&self) -> Vec<u8> {
        let img = &self.image;
        rgba_from(img.height, img.width, |r, c| {
            let v = (img.get(r, c, 0).clamp(0.0, 1.0) * 255.0) as u8;
            [v, v, v]
        })
    }

    /// Ground-truth instances, color-coded.
    pub fn render_ground_truth(&self) -> Vec<u8> {
        rgba_from(self.labels.height, self.labels.width, |r, c| {
            id_color(self.labels.get(r, c))
        })
    }

    /// Operation 2: normalized distance-to-boundary heatmap with the seeds a
    /// given threshold and suppression window produce, marked as crosses.
    pub fn render_distance_with_seeds(
        &self,
        threshold_frac: f64,
        window: u32,
    ) -> Result<Vec<u8>, String> {
        let seeds =
            extract_seeds(&self.dist, threshold_frac, window as usize).map_err(|e| e.to_string())?;
        let mut buf = rgba_from(self.dist.height, self.dist.width, |r, c| {
            heat_color(self.dist.get(r, c))
        });
        for s in &seeds {
            stamp_cross(
                &mut buf,
                self.dist.height,
                self.dist.width,
                s.row,
                s.col,
                [255, 40, 40],
            );
        }
        Ok(buf)
    }

    pub fn seed_count(&self, threshold_frac: f64, window: u32) -> Result<u32, String> {
        Ok(extract_seeds(&self.dist, threshold_frac, window as usize)
            .map_err(|e| e.to_string())?
            .len() as u32)
    }

    /// Operation 3: seeded angular clustering on noisy embeddings. Each
    /// instance gets an orthogonal unit direction, every pixel's vector is
    /// perturbed by Gaussian noise of the given strength and re-normalized,
    /// then the real clusterer segments the field with margin `delta_a_deg`.
    /// Returns the recovered instances as RGBA; `last_sbd` reports accuracy.
    pub fn cluster_noisy(
        &mut self,
        noise: f64,
        delta_a_deg: f64,
        noise_seed: u32,
    ) -> Result<Vec<u8>, String> {
        if !(0.0..=2.0).contains(&noise) {
            return Err(format!("noise must be in [0, 2], got {noise}"));
        }
        let (h, w) = (self.labels.height, self.labels.width);
        let c = self.labels.num_instances() as usize;
        let dim = c + 1;
        let mut emb = EmbeddingField::new(h, w, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed as u64);
        let gauss = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
        for (i, &id) in self.labels.ids.iter().enumerate() {
            let v = &mut emb.data[i * dim..(i + 1) * dim];
            v[id as usize] = 1.0;
            if noise > 0.0 {
                for x in v.iter_mut() {
                    *x += noise * gauss.sample(&mut rng);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in v.iter_mut() {
                *x /= norm;
            }
        }

        let cluster_cfg = ClusterConfig {
            delta_a_deg,
            ..ClusterConfig::default()
        };
        cluster_cfg.validate().map_err(|e| e.to_string())?;
        let seeds = extract_seeds(&self.dist, cluster_cfg.threshold_frac, cluster_cfg.window)
            .map_err(|e| e.to_string())?;
        let raw = angular_cluster(&emb, &seeds, &cluster_cfg).map_err(|e| e.to_string())?;
        let masked = apply_foreground_mask(&raw, &self.mask).map_err(|e| e.to_string())?;

        self.last_sbd = symmetric_best_dice(&masked.labels, &self.labels).map_err(|e| e.to_string())?;
        self.last_unassigned = masked.unassigned;
        let buf = rgba_from(h, w, |r, col| id_color(masked.labels.get(r, col)));
        self.clusters = Some(masked.labels);
        Ok(buf)
    }

    /// Accuracy of the most recent clustering against the ground truth.
    pub fn last_sbd(&self) -> f64 {
        self.last_sbd
    }

    pub fn last_unassigned(&self) -> u32 {
        self.last_unassigned as u32
    }

    /// How many instances the most recent clustering produced.
    pub fn last_cluster_count(&self) -> u32 {
        self.clusters.as_ref().map_or(0, |l| l.num_instances())
    }
}

/// Smoke hook for the page: proves the module is alive.
#[wasm_bindgen]
pub fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}
