//! Adam on an exponential-decay schedule, plus the end-to-end training loop:
//! batched forward, distance regression + embedding loss, manual backward,
//! per-epoch validation by running the full segmentation pipeline.

use std::io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clusterer::{angular_cluster, apply_foreground_mask, ClusterConfig, SegmentationResult};
use crate::datagen::{standardize_image, ForegroundMask, Image, LabelMap};
use crate::distfield::{compute_distmap, extract_seeds, DistMap};
use crate::error::{Error, Result};
use crate::losses::{
    distance_mse_grad, distance_mse_loss, embedding_loss, embedding_loss_grad, EmbeddingField,
    LossConfig,
};
use crate::metrics::symmetric_best_dice;
use crate::neighbors::{build_neighbor_graph, default_neighbor_radius, global_graph, NeighborGraph};
use crate::nnet::{ModelParams, Network, Tensor4, TopologySpec};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One annotated training example.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelMap,
    pub mask: ForegroundMask,
}

impl Scene {
    pub fn new(image: Image, labels: LabelMap, mask: ForegroundMask) -> Result<Self> {
        if image.height != labels.height
            || image.width != labels.width
            || mask.height != labels.height
            || mask.width != labels.width
        {
            return Err(Error::shape_mismatch(
                "Scene::new",
                image.height * image.width,
                labels.height * labels.width,
            ));
        }
        Ok(Scene { image, labels, mask })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_steps: f64,
    pub decay_rate: f64,
    /// Floor the decay exponent instead of letting it grow continuously.
    pub staircase: bool,
    pub batch_size: usize,
    /// Epoch ceiling; 0 means "do not train at all".
    pub max_epochs: usize,
    /// Global step budget; training stops at whichever ceiling hits first.
    pub max_steps: u64,
    pub loss: LossConfig,
    /// Carries the embedding dimension and the detach flag.
    pub topology: TopologySpec,
    pub seed: u64,
    /// None picks a radius scaled to the image side.
    pub neighbor_radius: Option<usize>,
    /// Treat every instance pair as neighbors instead of radius-local ones.
    pub global_constraints: bool,
    /// Steps during which only the distance loss backpropagates.
    pub pretrain_steps: u64,
    /// Validate every this many epochs.
    pub val_every: usize,
    /// Seed extraction + clustering settings used for validation mSBD.
    pub cluster: ClusterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            decay_steps: 5000.0,
            decay_rate: 0.9,
            staircase: false,
            batch_size: 4,
            max_epochs: 500,
            max_steps: 2000,
            loss: LossConfig::default(),
            topology: TopologySpec::default(),
            seed: 0,
            neighbor_radius: None,
            global_constraints: false,
            pretrain_steps: 0,
            val_every: 1,
            cluster: ClusterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.decay_steps.is_nan() || self.decay_steps <= 0.0 {
            return Err(Error::InvalidConfig("decay_steps must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay_rate must be in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidConfig("val_every must be at least 1".into()));
        }
        self.loss.validate()?;
        self.topology.validate()?;
        self.cluster.validate()?;
        Ok(())
    }
}

/// Learning rate after `step` optimizer updates.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let exponent = if cfg.staircase {
        (step as f64 / cfg.decay_steps).floor()
    } else {
        step as f64 / cfg.decay_steps
    };
    cfg.base_lr * cfg.decay_rate.powf(exponent)
}

/// Adam moments, kept in f64 regardless of the parameter dtype so the update
/// arithmetic does not depend on it.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new<S: Scalar>(params: &ModelParams<S>) -> Self {
        let m = (0..params.len())
            .map(|i| vec![0.0; params.by_index(i).1.data.len()])
            .collect::<Vec<_>>();
        OptimState { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update, in place. Every gradient is checked for
/// finiteness before any parameter moves, so a failed call leaves both
/// params and state untouched.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for i in 0..params.len() {
        let (name, p) = params.by_index(i);
        if p.grad.len() != state.m[i].len() {
            return Err(Error::Contract(format!(
                "optimizer state for {name} has {} values, gradient has {}",
                state.m[i].len(),
                p.grad.len()
            )));
        }
        if p.grad.iter().any(|&g| !g.to_f64().is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: name.to_string(),
                step: (state.t + 1) as usize,
            });
        }
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let (_, p) = params.by_index_mut(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let g = p.grad[j].to_f64();
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            p.data[j] = S::from_f64(p.data[j].to_f64() - update);
        }
    }
    Ok(())
}

/// One per-epoch row of the metrics log. `e_loss` sums every embedding-loss
/// head the topology trains (final plus intermediate, when present).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub step: u64,
    pub lr: f64,
    pub d_loss: f64,
    pub e_loss: f64,
    pub val_msbd: Option<f64>,
}

/// CSV with columns step, lr, d_loss, e_loss, val_msbd (blank when the epoch
/// ran no validation pass).
pub fn write_metrics_csv<W: io::Write>(log: &[EpochLog], out: &mut W) -> io::Result<()> {
    writeln!(out, "step,lr,d_loss,e_loss,val_msbd")?;
    for row in log {
        let val = row.val_msbd.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.step, row.lr, row.d_loss, row.e_loss, val
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub params: ModelParams<S>,
    pub log: Vec<EpochLog>,
    /// Set when training stopped early on a non-finite loss or gradient;
    /// `params` then holds the last state before the poisoned update.
    pub aborted: Option<String>,
    pub steps: u64,
}

impl<S: Scalar> TrainOutcome<S> {
    /// Validation mSBD of the last epoch that ran one.
    pub fn final_val_msbd(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|row| row.val_msbd)
    }
}

struct PreparedScene {
    pixels: Vec<f64>,
    gt_dist: DistMap,
    graph: NeighborGraph,
}

fn prepare_scenes(scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<PreparedScene>> {
    let (h, w, ch) = (
        scenes[0].image.height,
        scenes[0].image.width,
        scenes[0].image.channels,
    );
    let radius = cfg
        .neighbor_radius
        .unwrap_or_else(|| default_neighbor_radius(h, w));
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        if scene.image.height != h || scene.image.width != w || scene.image.channels != ch {
            return Err(Error::shape_mismatch(
                "train dataset rasters",
                h * w * ch,
                scene.image.height * scene.image.width * scene.image.channels,
            ));
        }
        scene.image.validate()?;
        let standardized = standardize_image(&scene.image);
        let graph = if cfg.global_constraints {
            global_graph(&scene.labels)
        } else {
            build_neighbor_graph(&scene.labels, radius)
        };
        out.push(PreparedScene {
            pixels: standardized.data.iter().map(|&x| x as f64).collect(),
            gt_dist: compute_distmap(&scene.labels),
            graph,
        });
    }
    Ok(out)
}

fn batch_tensor<S: Scalar>(
    prepared: &[PreparedScene],
    indices: &[usize],
    h: usize,
    w: usize,
    ch: usize,
) -> Tensor4<S> {
    let mut t = Tensor4::zeros(indices.len(), h, w, ch);
    for (slot, &i) in indices.iter().enumerate() {
        let dst = &mut t.data[slot * h * w * ch..(slot + 1) * h * w * ch];
        for (d, &s) in dst.iter_mut().zip(prepared[i].pixels.iter()) {
            *d = S::from_f64(s);
        }
    }
    t
}

fn distmap_from_tensor<S: Scalar>(t: &Tensor4<S>, item: usize) -> DistMap {
    let (h, w) = (t.h, t.w);
    debug_assert_eq!(t.c, 1);
    let src = &t.data[item * h * w..(item + 1) * h * w];
    DistMap {
        height: h,
        width: w,
        values: src.iter().map(|&x| x.to_f64()).collect(),
    }
}

fn field_from_tensor<S: Scalar>(t: &Tensor4<S>, item: usize) -> EmbeddingField {
    let (h, w, dim) = (t.h, t.w, t.c);
    let src = &t.data[item * h * w * dim..(item + 1) * h * w * dim];
    EmbeddingField {
        height: h,
        width: w,
        dim,
        data: src.iter().map(|&x| x.to_f64()).collect(),
    }
}

fn add_field_grad<S: Scalar>(seed: &mut Tensor4<S>, item: usize, grad: &[f64], scale: f64) {
    let len = seed.h * seed.w * seed.c;
    let dst = &mut seed.data[item * len..(item + 1) * len];
    for (d, &g) in dst.iter_mut().zip(grad.iter()) {
        *d = S::from_f64(g * scale);
    }
}

/// Full training loop. Validation scenes may be empty, in which case the log
/// never carries an mSBD. Deterministic for a fixed config.
pub fn train<S: Scalar>(
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let (h, w, ch) = (
        train_scenes[0].image.height,
        train_scenes[0].image.width,
        train_scenes[0].image.channels,
    );
    let net = Network::new(cfg.topology.clone(), ch)?;
    let mut params: ModelParams<S> = net.init_params(cfg.seed);
    if cfg.max_epochs == 0 || cfg.max_steps == 0 {
        return Ok(TrainOutcome { params, log: Vec::new(), aborted: None, steps: 0 });
    }

    let prepared = prepare_scenes(train_scenes, cfg)?;
    let mut opt = OptimState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut indices: Vec<usize> = (0..train_scenes.len()).collect();

    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut aborted = None;

    'epochs: for epoch in 0..cfg.max_epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_d = 0.0;
        let mut epoch_e = 0.0;
        let mut epoch_steps = 0u64;
        let mut last_lr = lr_at(step, cfg);

        for chunk in indices.chunks(cfg.batch_size) {
            if step >= cfg.max_steps {
                break;
            }
            let batch = batch_tensor::<S>(&prepared, chunk, h, w, ch);
            let tape = net.forward(&batch, &params)?;
            let dist_pred = net.distmap(&tape);
            let emb_pred = net.embeddings(&tape);
            let inter_pred = net.intermediate_embeddings(&tape);

            let inv_b = 1.0 / chunk.len() as f64;
            let mut dist_seed = Tensor4::<S>::zeros(chunk.len(), h, w, 1);
            let mut emb_seed = Tensor4::<S>::zeros(chunk.len(), h, w, emb_pred.c);
            let mut inter_seed =
                inter_pred.map(|t| Tensor4::<S>::zeros(chunk.len(), h, w, t.c));
            let mut d_loss = 0.0;
            let mut e_loss = 0.0;

            for (slot, &i) in chunk.iter().enumerate() {
                let scene = &train_scenes[i];
                let prep = &prepared[i];

                let pred = distmap_from_tensor(dist_pred, slot);
                d_loss += distance_mse_loss(&pred, &prep.gt_dist)? * inv_b;
                let d_grad = distance_mse_grad(&pred, &prep.gt_dist)?;
                add_field_grad(&mut dist_seed, slot, &d_grad.values, inv_b);

                let field = field_from_tensor(emb_pred, slot);
                e_loss +=
                    embedding_loss(&field, &scene.labels, &prep.graph, &cfg.loss)? * inv_b;
                let e_grad =
                    embedding_loss_grad(&field, &scene.labels, &prep.graph, &cfg.loss)?;
                add_field_grad(&mut emb_seed, slot, &e_grad.data, inv_b);

                if let (Some(pred_t), Some(seed_t)) = (inter_pred, inter_seed.as_mut()) {
                    let field = field_from_tensor(pred_t, slot);
                    e_loss +=
                        embedding_loss(&field, &scene.labels, &prep.graph, &cfg.loss)? * inv_b;
                    let g =
                        embedding_loss_grad(&field, &scene.labels, &prep.graph, &cfg.loss)?;
                    add_field_grad(seed_t, slot, &g.data, inv_b);
                }
            }

            if !d_loss.is_finite() || !e_loss.is_finite() {
                aborted = Some(format!(
                    "non-finite loss at step {step}: d_loss {d_loss}, e_loss {e_loss}"
                ));
                break 'epochs;
            }

            let embedding_phase = step >= cfg.pretrain_steps;
            params.zero_grads();
            net.backward(
                &tape,
                &mut params,
                Some(&dist_seed),
                embedding_phase.then_some(&emb_seed),
                if embedding_phase {
                    inter_seed.as_ref()
                } else {
                    None
                },
            )?;

            last_lr = lr_at(step, cfg);
            if let Err(e) = adam_step(&mut params, &mut opt, last_lr) {
                aborted = Some(e.to_string());
                break 'epochs;
            }

            step += 1;
            epoch_steps += 1;
            epoch_d += d_loss;
            epoch_e += e_loss;
        }

        if epoch_steps == 0 {
            break;
        }
        let val_msbd = if !val_scenes.is_empty() && (epoch + 1) % cfg.val_every == 0 {
            Some(validation_msbd(&net, &params, val_scenes, &cfg.cluster)?)
        } else {
            None
        };
        log.push(EpochLog {
            step,
            lr: last_lr,
            d_loss: epoch_d / epoch_steps as f64,
            e_loss: epoch_e / epoch_steps as f64,
            val_msbd,
        });
        if step >= cfg.max_steps {
            break;
        }
    }

    // The last row always carries a validation score, even when val_every
    // skipped that epoch.
    if aborted.is_none() && !val_scenes.is_empty() {
        if let Some(last) = log.last_mut() {
            if last.val_msbd.is_none() {
                last.val_msbd = Some(validation_msbd(&net, &params, val_scenes, &cfg.cluster)?);
            }
        }
    }

    Ok(TrainOutcome { params, log, aborted, steps: step })
}

/// Runs the network on one image and returns the predicted distance map and
/// embedding field.
pub fn predict<S: Scalar>(
    net: &Network,
    params: &ModelParams<S>,
    image: &Image,
) -> Result<(DistMap, EmbeddingField)> {
    image.validate()?;
    let standardized = standardize_image(image);
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut t = Tensor4::<S>::zeros(1, h, w, ch);
    for (d, &s) in t.data.iter_mut().zip(standardized.data.iter()) {
        *d = S::from_f64(s as f64);
    }
    let tape = net.forward(&t, params)?;
    Ok((
        distmap_from_tensor(net.distmap(&tape), 0),
        field_from_tensor(net.embeddings(&tape), 0),
    ))
}

/// Full pipeline on one image: predict, extract seeds, cluster, and mask
/// when a foreground mask is supplied.
pub fn segment_image<S: Scalar>(
    net: &Network,
    params: &ModelParams<S>,
    image: &Image,
    mask: Option<&ForegroundMask>,
    cluster: &ClusterConfig,
) -> Result<SegmentationResult> {
    let (dist, emb) = predict(net, params, image)?;
    let seeds = extract_seeds(&dist, cluster.threshold_frac, cluster.window)?;
    let result = angular_cluster(&emb, &seeds, cluster)?;
    match mask {
        Some(m) => apply_foreground_mask(&result, m),
        None => Ok(result),
    }
}

/// Mean SBD of the pipeline's predictions against ground truth.
pub fn validation_msbd<S: Scalar>(
    net: &Network,
    params: &ModelParams<S>,
    scenes: &[Scene],
    cluster: &ClusterConfig,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let mut total = 0.0;
    for scene in scenes {
        let result = segment_image(net, params, &scene.image, Some(&scene.mask), cluster)?;
        total += symmetric_best_dice(&result.labels, &scene.labels)?;
    }
    Ok(total / scenes.len() as f64)
}
