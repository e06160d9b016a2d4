//! The two training losses and their analytic gradients: the cosine
//! embedding loss over instance means (weighted inter-instance similarity
//! plus intra-instance dissimilarity) and the distance-regression MSE.
//!
//! All loss math runs in f64 regardless of the network precision, so
//! gradients can be checked against central finite differences tightly.

use crate::datagen::LabelMap;
use crate::distfield::DistMap;
use crate::error::{Error, Result};
use crate::neighbors::NeighborGraph;

/// Dense per-pixel embedding vectors, pixel-major: `data[(r*w + c)*dim + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingField {
    pub fn new(height: usize, width: usize, dim: usize) -> Self {
        EmbeddingField {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.dim;
        &mut self.data[i..i + self.dim]
    }
}

/// Per-instance pixel counts and mean embeddings. Means are arithmetic means
/// of the raw pixel vectors; they are deliberately not re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub counts: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

impl InstanceStats {
    pub fn num_instances(&self) -> usize {
        self.counts.len()
    }
}

/// Weighting and switches for the embedding loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub include_intra: bool,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            include_intra: true,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Cosine similarity with both denominators floored at `eps`, clamped to
/// [-1, 1]. Zero vectors score 0 against anything.
pub fn cosine_similarity(a: &[f64], b: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let s = dot / (na.sqrt().max(eps) * nb.sqrt().max(eps));
    s.clamp(-1.0, 1.0)
}

/// d/da of the unclamped cosine similarity, written into `out`.
/// Below the eps floor the norm is treated as the constant eps, matching the
/// value computation.
fn cosine_grad_a(a: &[f64], b: &[f64], eps: f64, out: &mut [f64]) {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    let na = na2.sqrt().max(eps);
    let nb = nb2.sqrt().max(eps);
    let inv = 1.0 / (na * nb);
    if na2.sqrt() >= eps {
        let coef = dot / (na * na);
        for i in 0..a.len() {
            out[i] = (b[i] - coef * a[i]) * inv;
        }
    } else {
        for i in 0..a.len() {
            out[i] = b[i] * inv;
        }
    }
}

/// Counts pixels and accumulates mean embeddings for each instance.
pub fn instance_stats(emb: &EmbeddingField, labels: &LabelMap) -> Result<InstanceStats> {
    if emb.height != labels.height || emb.width != labels.width {
        return Err(Error::shape_mismatch(
            "instance_stats",
            labels.height * labels.width,
            emb.height * emb.width,
        ));
    }
    let c = labels.num_instances() as usize;
    let mut counts = vec![0usize; c];
    let mut means = vec![vec![0.0; emb.dim]; c];
    for r in 0..labels.height {
        for col in 0..labels.width {
            let id = labels.get(r, col);
            if id == 0 {
                continue;
            }
            let k = id as usize - 1;
            counts[k] += 1;
            for (m, &v) in means[k].iter_mut().zip(emb.pixel(r, col)) {
                *m += v;
            }
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Contract(format!(
                "instance {} has no pixels; label map is not canonical",
                k + 1
            )));
        }
        let inv = 1.0 / n as f64;
        means[k].iter_mut().for_each(|m| *m *= inv);
    }
    Ok(InstanceStats { counts, means })
}

/// Mean over instances of the mean dissimilarity between each pixel and its
/// instance mean: (1/C) sum_c (1/E_c) sum_i [1 - S_cos(e_i, mu_c)].
pub fn intra_loss(emb: &EmbeddingField, labels: &LabelMap, stats: &InstanceStats, eps: f64) -> f64 {
    let c = stats.num_instances();
    if c == 0 {
        return 0.0;
    }
    let mut per_instance = vec![0.0f64; c];
    for r in 0..labels.height {
        for col in 0..labels.width {
            let id = labels.get(r, col);
            if id == 0 {
                continue;
            }
            let k = id as usize - 1;
            per_instance[k] += 1.0 - cosine_similarity(emb.pixel(r, col), &stats.means[k], eps);
        }
    }
    per_instance
        .iter()
        .zip(stats.counts.iter())
        .map(|(&sum, &n)| sum / n as f64)
        .sum::<f64>()
        / c as f64
}

/// Mean over instances of the mean cosine similarity between the instance
/// mean and each neighbor's mean. Instances without neighbors contribute 0.
pub fn inter_loss(stats: &InstanceStats, graph: &NeighborGraph, eps: f64) -> f64 {
    let c = stats.num_instances();
    if c == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for id in 1..=c as u32 {
        let neigh = graph.neighbors(id);
        if neigh.is_empty() {
            continue;
        }
        let a = &stats.means[id as usize - 1];
        let sum: f64 = neigh
            .iter()
            .map(|&b| cosine_similarity(a, &stats.means[b as usize - 1], eps))
            .sum();
        total += sum / neigh.len() as f64;
    }
    total / c as f64
}

/// lambda * inter + intra (intra dropped when the config says so).
pub fn embedding_loss(
    emb: &EmbeddingField,
    labels: &LabelMap,
    graph: &NeighborGraph,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let stats = instance_stats(emb, labels)?;
    let mut loss = cfg.lambda * inter_loss(&stats, graph, cfg.epsilon);
    if cfg.include_intra {
        loss += intra_loss(emb, labels, &stats, cfg.epsilon);
    }
    Ok(loss)
}

/// Exact analytic gradient of `embedding_loss` with respect to every pixel
/// embedding, including the dependence of each instance mean on its pixels.
/// Background pixels get zero gradient.
pub fn embedding_loss_grad(
    emb: &EmbeddingField,
    labels: &LabelMap,
    graph: &NeighborGraph,
    cfg: &LossConfig,
) -> Result<EmbeddingField> {
    cfg.validate()?;
    let stats = instance_stats(emb, labels)?;
    let c = stats.num_instances();
    let dim = emb.dim;
    let eps = cfg.epsilon;
    let mut grad = EmbeddingField::new(emb.height, emb.width, dim);
    if c == 0 {
        return Ok(grad);
    }

    // dL/d(mu_c), accumulated from whichever terms are active
    let mut mean_grad = vec![vec![0.0f64; dim]; c];
    let mut scratch = vec![0.0f64; dim];

    if cfg.lambda != 0.0 {
        // Inter term: every anchored pair (X, Y in N_X) is one loss term;
        // push its derivative into both endpoint means here.
        let w = cfg.lambda / c as f64;
        for id in 1..=c as u32 {
            let x = id as usize - 1;
            let neigh = graph.neighbors(id);
            if neigh.is_empty() {
                continue;
            }
            let inv_n = 1.0 / neigh.len() as f64;
            for &other in neigh {
                let y = other as usize - 1;
                cosine_grad_a(&stats.means[x], &stats.means[y], eps, &mut scratch);
                for (g, &v) in mean_grad[x].iter_mut().zip(scratch.iter()) {
                    *g += w * inv_n * v;
                }
                // same term differentiated at the neighbor's mean
                cosine_grad_a(&stats.means[y], &stats.means[x], eps, &mut scratch);
                for (g, &v) in mean_grad[y].iter_mut().zip(scratch.iter()) {
                    *g += w * inv_n * v;
                }
            }
        }
    }

    if cfg.include_intra {
        // Intra term: direct pixel gradient now, mean-path contribution
        // accumulated into mean_grad first.
        let w = 1.0 / c as f64;
        for r in 0..labels.height {
            for col in 0..labels.width {
                let id = labels.get(r, col);
                if id == 0 {
                    continue;
                }
                let k = id as usize - 1;
                let inv_e = 1.0 / stats.counts[k] as f64;
                cosine_grad_a(emb.pixel(r, col), &stats.means[k], eps, &mut scratch);
                for (g, &v) in grad.pixel_mut(r, col).iter_mut().zip(scratch.iter()) {
                    *g -= w * inv_e * v;
                }
                cosine_grad_a(&stats.means[k], emb.pixel(r, col), eps, &mut scratch);
                for (g, &v) in mean_grad[k].iter_mut().zip(scratch.iter()) {
                    *g -= w * inv_e * v;
                }
            }
        }
    }

    // push mean gradients back to pixels: d(mu_c)/d(e_j) = I / E_c
    for r in 0..labels.height {
        for col in 0..labels.width {
            let id = labels.get(r, col);
            if id == 0 {
                continue;
            }
            let k = id as usize - 1;
            let inv_e = 1.0 / stats.counts[k] as f64;
            for (g, &v) in grad.pixel_mut(r, col).iter_mut().zip(mean_grad[k].iter()) {
                *g += inv_e * v;
            }
        }
    }
    Ok(grad)
}

/// Mean squared error over every pixel, background included.
pub fn distance_mse_loss(pred: &DistMap, gt: &DistMap) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape_mismatch(
            "distance_mse_loss",
            gt.values.len(),
            pred.values.len(),
        ));
    }
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(gt.values.iter())
        .map(|(&p, &g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
}

/// Gradient of the MSE with respect to the prediction: 2(pred - gt)/N.
pub fn distance_mse_grad(pred: &DistMap, gt: &DistMap) -> Result<DistMap> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape_mismatch(
            "distance_mse_grad",
            gt.values.len(),
            pred.values.len(),
        ));
    }
    let n = pred.values.len() as f64;
    Ok(DistMap {
        height: pred.height,
        width: pred.width,
        values: pred
            .values
            .iter()
            .zip(gt.values.iter())
            .map(|(&p, &g)| 2.0 * (p - g) / n)
            .collect(),
    })
}

/// Diagnostic: mean over foreground pixels of the cosine similarity to their
/// own instance mean. 1.0 means every instance collapsed to a single
/// direction; returns None when the map has no foreground.
pub fn intra_consistency(emb: &EmbeddingField, labels: &LabelMap) -> Result<Option<f64>> {
    let stats = instance_stats(emb, labels)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..labels.height {
        for c in 0..labels.width {
            let id = labels.get(r, c);
            if id == 0 {
                continue;
            }
            let mean = &stats.means[id as usize - 1];
            total += cosine_similarity(emb.pixel(r, c), mean, 1e-8);
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}
