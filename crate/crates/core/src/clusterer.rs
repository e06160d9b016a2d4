//! Turns a field of unit embeddings into instance labels: seeded angular
//! clustering (the default) and a mean-shift baseline on the sphere.

use crate::datagen::{ForegroundMask, LabelMap};
use crate::distfield::Seed;
use crate::error::{Error, Result};
use crate::losses::{cosine_similarity, EmbeddingField};

const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Angular margin in degrees; pixels join a seed iff the cosine
    /// similarity is at least cos(delta_a).
    pub delta_a_deg: f64,
    /// Seeds are distance-map peaks at least this fraction of the global max.
    pub threshold_frac: f64,
    /// Half-width of the local-maximum window for seed extraction.
    pub window: usize,
    /// Mean-shift kernel radius in cosine distance (1 - similarity).
    pub bandwidth: f64,
    /// Mean-shift iteration cap per pixel.
    pub max_iterations: usize,
    /// Keep only the connected component containing each seed.
    pub connectivity_filter: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            delta_a_deg: 45.0,
            threshold_frac: 0.7,
            window: 5,
            bandwidth: 0.5,
            max_iterations: 100,
            connectivity_filter: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_a_deg > 0.0 && self.delta_a_deg < 90.0) {
            return Err(Error::InvalidConfig(format!(
                "delta_a_deg must be in (0, 90), got {}",
                self.delta_a_deg
            )));
        }
        if !(self.threshold_frac > 0.0 && self.threshold_frac <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold_frac must be in (0, 1], got {}",
                self.threshold_frac
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth < 2.0) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be in (0, 2), got {}",
                self.bandwidth
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub labels: LabelMap,
    /// (instance id, originating seed); empty for mean-shift results.
    pub seeds: Vec<(u32, Seed)>,
    /// Pixels that no instance claimed. Before masking this counts the whole
    /// raster; `apply_foreground_mask` recounts over foreground only.
    pub unassigned: usize,
}

fn check_field(emb: &EmbeddingField) -> Result<()> {
    if emb.height == 0 || emb.width == 0 || emb.dim == 0 {
        return Err(Error::Contract(format!(
            "embedding field must be non-empty, got {}x{}x{}",
            emb.height, emb.width, emb.dim
        )));
    }
    Ok(())
}

/// Seeded angular clustering. Seeds claim pixels in descending peak order;
/// a pixel joins the first seed whose embedding lies within `delta_a_deg` of
/// its own, and claimed pixels are never revisited. Seeds that land on
/// already-claimed pixels are skipped.
pub fn angular_cluster(
    emb: &EmbeddingField,
    seeds: &[Seed],
    cfg: &ClusterConfig,
) -> Result<SegmentationResult> {
    check_field(emb)?;
    cfg.validate()?;
    let (h, w) = (emb.height, emb.width);
    for s in seeds {
        if s.row >= h || s.col >= w {
            return Err(Error::Contract(format!(
                "seed ({}, {}) outside {h}x{w} field",
                s.row, s.col
            )));
        }
    }
    let mut order: Vec<&Seed> = seeds.iter().collect();
    order.sort_by(|a, b| {
        b.value
            .partial_cmp(&a.value)
            .expect("seed values are finite")
            .then_with(|| (a.row, a.col).cmp(&(b.row, b.col)))
    });

    let cos_threshold = cfg.delta_a_deg.to_radians().cos();
    let mut labels = LabelMap::new(h, w);
    let mut provenance = Vec::new();
    let mut next_id = 1u32;
    for seed in order {
        if labels.get(seed.row, seed.col) != 0 {
            continue;
        }
        let id = next_id;
        next_id += 1;
        let anchor = emb.pixel(seed.row, seed.col).to_vec();
        for r in 0..h {
            for c in 0..w {
                if labels.get(r, c) != 0 {
                    continue;
                }
                if cosine_similarity(&anchor, emb.pixel(r, c), COSINE_EPS) >= cos_threshold {
                    labels.set(r, c, id);
                }
            }
        }
        provenance.push((id, *seed));
    }

    if cfg.connectivity_filter {
        keep_seed_components(&mut labels, &provenance);
    }

    let unassigned = labels.ids.iter().filter(|&&id| id == 0).count();
    Ok(SegmentationResult { labels, seeds: provenance, unassigned })
}

/// Per instance, zero every pixel outside the 4-connected component that
/// contains its seed.
fn keep_seed_components(labels: &mut LabelMap, provenance: &[(u32, Seed)]) {
    let (h, w) = (labels.height, labels.width);
    let mut keep = vec![false; h * w];
    let mut stack = Vec::new();
    for (id, seed) in provenance {
        stack.push((seed.row, seed.col));
        keep[seed.row * w + seed.col] = true;
        while let Some((r, c)) = stack.pop() {
            let mut visit = |nr: usize, nc: usize| {
                let i = nr * w + nc;
                if !keep[i] && labels.ids[i] == *id {
                    keep[i] = true;
                    stack.push((nr, nc));
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
        }
    }
    for (i, id) in labels.ids.iter_mut().enumerate() {
        if *id != 0 && !keep[i] {
            *id = 0;
        }
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b, COSINE_EPS)
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > COSINE_EPS {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Mean shift on the unit sphere with a flat kernel in cosine distance.
/// Each pixel's trajectory walks independently (so the result cannot depend
/// on visiting order); converged points within `bandwidth / 2` collapse to
/// one mode, discovered in row-major order, and every pixel takes the mode
/// nearest its converged point. With a mask, background pixels stay 0 and do
/// not influence the kernel.
pub fn mean_shift_cluster(
    emb: &EmbeddingField,
    cfg: &ClusterConfig,
    foreground: Option<&ForegroundMask>,
) -> Result<SegmentationResult> {
    check_field(emb)?;
    cfg.validate()?;
    let (h, w, dim) = (emb.height, emb.width, emb.dim);
    if let Some(mask) = foreground {
        if mask.height != h || mask.width != w {
            return Err(Error::shape_mismatch(
                "mean_shift_cluster mask",
                h * w,
                mask.mask.len(),
            ));
        }
    }
    let active: Vec<usize> = (0..h * w)
        .filter(|&i| foreground.is_none_or(|m| m.mask[i]))
        .collect();
    if active.is_empty() {
        return Ok(SegmentationResult {
            labels: LabelMap::new(h, w),
            seeds: Vec::new(),
            unassigned: 0,
        });
    }

    let points: Vec<&[f64]> = active
        .iter()
        .map(|&i| &emb.data[i * dim..(i + 1) * dim])
        .collect();

    // Trajectories: the flat kernel makes each step a pure function of the
    // membership set, so stability of that set is exact convergence.
    let mut converged: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for start in &points {
        let mut y: Vec<f64> = start.to_vec();
        normalize_in_place(&mut y);
        let mut members: Vec<usize> = Vec::new();
        for _ in 0..cfg.max_iterations {
            let new_members: Vec<usize> = (0..points.len())
                .filter(|&j| cosine_distance(points[j], &y) <= cfg.bandwidth)
                .collect();
            if new_members == members {
                break;
            }
            let mut mean = vec![0.0; dim];
            for &j in &new_members {
                for (m, &v) in mean.iter_mut().zip(points[j]) {
                    *m += v;
                }
            }
            let inv = 1.0 / new_members.len() as f64;
            for m in mean.iter_mut() {
                *m *= inv;
            }
            normalize_in_place(&mut mean);
            y = mean;
            members = new_members;
        }
        converged.push(y);
    }

    // Mode collection in row-major order of active pixels.
    let merge_radius = cfg.bandwidth / 2.0;
    let mut modes: Vec<Vec<f64>> = Vec::new();
    for y in &converged {
        if !modes.iter().any(|m| cosine_distance(m, y) <= merge_radius) {
            modes.push(y.clone());
        }
    }

    let mut labels = LabelMap::new(h, w);
    for (k, &i) in active.iter().enumerate() {
        let y = &converged[k];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (m, mode) in modes.iter().enumerate() {
            let d = cosine_distance(mode, y);
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        labels.ids[i] = best as u32 + 1;
    }
    Ok(SegmentationResult {
        labels,
        seeds: Vec::new(),
        unassigned: 0,
    })
}

/// Zero every label outside the mask, drop instances that become empty, and
/// renumber the survivors contiguously. Seed provenance follows the
/// renumbering; `unassigned` becomes the count of unlabeled foreground.
pub fn apply_foreground_mask(
    result: &SegmentationResult,
    mask: &ForegroundMask,
) -> Result<SegmentationResult> {
    let labels = &result.labels;
    if mask.height != labels.height || mask.width != labels.width {
        return Err(Error::shape_mismatch(
            "apply_foreground_mask",
            labels.ids.len(),
            mask.mask.len(),
        ));
    }
    let mut masked = labels.clone();
    for (id, &fg) in masked.ids.iter_mut().zip(mask.mask.iter()) {
        if !fg {
            *id = 0;
        }
    }
    let (canonical, mapping) = masked.canonicalize();
    let seeds = result
        .seeds
        .iter()
        .filter_map(|(old_id, seed)| {
            mapping
                .iter()
                .find(|(old, _)| old == old_id)
                .map(|&(_, new_id)| (new_id, *seed))
        })
        .collect();
    let unassigned = canonical
        .ids
        .iter()
        .zip(mask.mask.iter())
        .filter(|&(&id, &fg)| fg && id == 0)
        .count();
    Ok(SegmentationResult { labels: canonical, seeds, unassigned })
}
