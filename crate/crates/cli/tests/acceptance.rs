//! The release gate: one test per shipping criterion, each ending in a
//! single PASS line. Criteria 6-9 are statistical (3 seeds, median, fast
//! profile) and share one training batch through a lazy static so the whole
//! suite stays inside the CPU budget.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use embedseg_core::clusterer::{angular_cluster, ClusterConfig};
use embedseg_core::datagen::{synth_generate, LabelMap, SceneConfig, ShapeFamily};
use embedseg_core::distfield::{compute_distmap, DistMap, Seed};
use embedseg_core::gradcheck::{max_relative_error, numeric_gradient, relative_error};
use embedseg_core::losses::{
    cosine_similarity, distance_mse_grad, distance_mse_loss, embedding_loss, embedding_loss_grad,
    instance_stats, intra_consistency, intra_loss, EmbeddingField, LossConfig,
};
use embedseg_core::metrics::{ap_per_threshold, default_iou_thresholds, symmetric_best_dice};
use embedseg_core::neighbors::{build_neighbor_graph, global_graph};
use embedseg_core::nnet::ops::{
    conv2d_backward, conv2d_forward, l2_normalize_backward, l2_normalize_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, upsample2_concat_backward,
    upsample2_concat_forward,
};
use embedseg_core::nnet::{Network, Tensor4};
use embedseg_core::trainer::{lr_at, predict, train, Scene, TrainConfig, TrainOutcome};

use embedseg_cli::config::{apply_fast_profile, apply_fast_synth_profile, SynthConfig};
use embedseg_cli::data::generate_dataset;
use embedseg_cli::experiments::{
    dataset_seed, median, run_experiment, train_seed, AblateSettings, ExperimentReport,
    EXPERIMENT_NAMES,
};

fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor4<f64> {
    let data = (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor4::from_vec(n, h, w, c, data).unwrap()
}

fn probe(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Random canonical label map: `count` rectangles painted in id order, then
/// ids compacted so the nonzero set is exactly 1..=C.
fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> LabelMap {
    loop {
        let mut ids = vec![0u32; h * w];
        for id in 1..=count as u32 {
            let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (rh, cw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            for r in r0..(r0 + rh).min(h) {
                for c in c0..(c0 + cw).min(w) {
                    ids[r * w + c] = id;
                }
            }
        }
        let mut seen: Vec<u32> = ids.iter().copied().filter(|&v| v != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.is_empty() {
            continue;
        }
        let remap: std::collections::HashMap<u32, u32> =
            seen.iter().enumerate().map(|(i, &v)| (v, i as u32 + 1)).collect();
        for v in &mut ids {
            if *v != 0 {
                *v = remap[v];
            }
        }
        return LabelMap::from_ids(h, w, ids).unwrap();
    }
}

const FD_STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-5;

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let runs = 100;

    // convolution: input, kernel and bias gradients
    for i in 0..runs {
        let k = if i % 2 == 0 { 1 } else { 3 };
        let (n, h, w, ci, co) = (1, 4, 4, 2, 2);
        let x = rand_tensor(&mut rng, n, h, w, ci);
        let wt: Vec<f64> = (0..k * k * ci * co).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let r = probe(&mut rng, n * h * w * co);
        let dy = Tensor4::from_vec(n, h, w, co, r.clone()).unwrap();
        let (dx, dw, db) = conv2d_backward(&x, &wt, k, ci, co, &dy).unwrap();
        let loss_x = |v: &[f64]| {
            let t = Tensor4::from_vec(n, h, w, ci, v.to_vec()).unwrap();
            dot(&conv2d_forward(&t, &wt, &b, k, ci, co).unwrap().data, &r)
        };
        let loss_w = |v: &[f64]| dot(&conv2d_forward(&x, v, &b, k, ci, co).unwrap().data, &r);
        let loss_b = |v: &[f64]| dot(&conv2d_forward(&x, &wt, v, k, ci, co).unwrap().data, &r);
        assert!(
            max_relative_error(&numeric_gradient(loss_x, &x.data, FD_STEP), &dx.data, 1e-6)
                <= OP_TOL
        );
        assert!(max_relative_error(&numeric_gradient(loss_w, &wt, FD_STEP), &dw, 1e-6) <= OP_TOL);
        assert!(max_relative_error(&numeric_gradient(loss_b, &b, FD_STEP), &db, 1e-6) <= OP_TOL);
    }

    // relu, inputs conditioned away from the kink at zero
    for _ in 0..runs {
        let (n, h, w, c) = (1, 3, 4, 2);
        let mut x = rand_tensor(&mut rng, n, h, w, c);
        for v in &mut x.data {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let r = probe(&mut rng, x.data.len());
        let dy = Tensor4::from_vec(n, h, w, c, r.clone()).unwrap();
        let dx = relu_backward(&x, &dy).unwrap();
        let loss = |v: &[f64]| {
            let t = Tensor4::from_vec(n, h, w, c, v.to_vec()).unwrap();
            dot(&relu_forward(&t).data, &r)
        };
        assert!(
            max_relative_error(&numeric_gradient(loss, &x.data, FD_STEP), &dx.data, 1e-6)
                <= OP_TOL
        );
    }

    // max pooling, each window's maximum lifted clear of the runner-up so
    // central differences stay on one linear piece
    for _ in 0..runs {
        let (n, h, w, c) = (1, 4, 4, 2);
        let mut x = rand_tensor(&mut rng, n, h, w, c);
        for nn in 0..n {
            for cc in 0..c {
                for py in 0..h / 2 {
                    for px in 0..w / 2 {
                        let window: Vec<usize> = (0..4)
                            .map(|k| x.idx(nn, 2 * py + k / 2, 2 * px + k % 2, cc))
                            .collect();
                        let best = *window
                            .iter()
                            .max_by(|&&a, &&b| x.data[a].partial_cmp(&x.data[b]).unwrap())
                            .unwrap();
                        x.data[best] += 0.01;
                    }
                }
            }
        }
        let (_, argmax) = maxpool2_forward(&x).unwrap();
        let r = probe(&mut rng, n * (h / 2) * (w / 2) * c);
        let dy = Tensor4::from_vec(n, h / 2, w / 2, c, r.clone()).unwrap();
        let dx = maxpool2_backward(x.shape(), &argmax, &dy).unwrap();
        let loss = |v: &[f64]| {
            let t = Tensor4::from_vec(n, h, w, c, v.to_vec()).unwrap();
            dot(&maxpool2_forward(&t).unwrap().0.data, &r)
        };
        assert!(
            max_relative_error(&numeric_gradient(loss, &x.data, FD_STEP), &dx.data, 1e-6)
                <= OP_TOL
        );
    }

    // nearest-neighbor upsample fused with the skip concatenation
    for _ in 0..runs {
        let (n, hh, ww, cx, cs) = (1, 2, 2, 2, 1);
        let x = rand_tensor(&mut rng, n, hh, ww, cx);
        let skip = rand_tensor(&mut rng, n, 2 * hh, 2 * ww, cs);
        let r = probe(&mut rng, n * 2 * hh * 2 * ww * (cx + cs));
        let dy = Tensor4::from_vec(n, 2 * hh, 2 * ww, cx + cs, r.clone()).unwrap();
        let (dx, dskip) = upsample2_concat_backward(x.shape(), cs, &dy).unwrap();
        let loss_x = |v: &[f64]| {
            let t = Tensor4::from_vec(n, hh, ww, cx, v.to_vec()).unwrap();
            dot(&upsample2_concat_forward(&t, &skip).unwrap().data, &r)
        };
        let loss_s = |v: &[f64]| {
            let t = Tensor4::from_vec(n, 2 * hh, 2 * ww, cs, v.to_vec()).unwrap();
            dot(&upsample2_concat_forward(&x, &t).unwrap().data, &r)
        };
        assert!(
            max_relative_error(&numeric_gradient(loss_x, &x.data, FD_STEP), &dx.data, 1e-6)
                <= OP_TOL
        );
        assert!(
            max_relative_error(
                &numeric_gradient(loss_s, &skip.data, FD_STEP),
                &dskip.data,
                1e-6
            ) <= OP_TOL
        );
    }

    // per-pixel L2 normalization
    for _ in 0..runs {
        let (n, h, w, c) = (1, 3, 3, 4);
        let x = rand_tensor(&mut rng, n, h, w, c);
        let y = l2_normalize_forward(&x, 1e-6);
        let r = probe(&mut rng, x.data.len());
        let dy = Tensor4::from_vec(n, h, w, c, r.clone()).unwrap();
        let dx = l2_normalize_backward(&x, &y, &dy, 1e-6).unwrap();
        let loss = |v: &[f64]| {
            let t = Tensor4::from_vec(n, h, w, c, v.to_vec()).unwrap();
            dot(&l2_normalize_forward(&t, 1e-6).data, &r)
        };
        assert!(
            max_relative_error(&numeric_gradient(loss, &x.data, FD_STEP), &dx.data, 1e-6)
                <= OP_TOL
        );
    }

    // composite embedding loss at the tight standalone-loss tolerance
    for i in 0..runs {
        let (h, w) = (6, 6);
        let labels = random_labels(&mut rng, h, w, 1 + i % 3);
        let mut emb = EmbeddingField::new(h, w, 3);
        for v in &mut emb.data {
            *v = rng.gen_range(-1.0..1.0);
            if v.abs() < 0.1 {
                *v += 0.2;
            }
        }
        let graph = build_neighbor_graph(&labels, 3);
        let cfg = LossConfig {
            lambda: [0.5, 1.0, 10.0][i % 3],
            ..LossConfig::default()
        };
        let grad = embedding_loss_grad(&emb, &labels, &graph, &cfg).unwrap();
        let loss = |v: &[f64]| {
            let field = EmbeddingField {
                height: h,
                width: w,
                dim: 3,
                data: v.to_vec(),
            };
            embedding_loss(&field, &labels, &graph, &cfg).unwrap()
        };
        assert!(
            max_relative_error(&numeric_gradient(loss, &emb.data, FD_STEP), &grad.data, 1e-7)
                <= LOSS_TOL,
            "embedding loss gradient mismatch on instance {i}"
        );
    }

    // distance regression MSE at the tight standalone-loss tolerance
    for _ in 0..runs {
        let (h, w) = (5, 7);
        let gt = DistMap {
            height: h,
            width: w,
            values: (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let pred = DistMap {
            height: h,
            width: w,
            values: (0..h * w).map(|_| rng.gen_range(-0.5..1.5)).collect(),
        };
        let grad = distance_mse_grad(&pred, &gt).unwrap();
        let loss = |v: &[f64]| {
            let p = DistMap {
                height: h,
                width: w,
                values: v.to_vec(),
            };
            distance_mse_loss(&p, &gt).unwrap()
        };
        assert!(
            max_relative_error(
                &numeric_gradient(loss, &pred.values, FD_STEP),
                &grad.values,
                1e-7
            ) <= LOSS_TOL
        );
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs <= 60.0, "gradient suite took {secs:.1}s, budget is 60s");
    println!("criterion 1 PASS: finite-difference suite, {runs} instances per primitive, {secs:.1}s");
}

// ---------------------------------------------------------------- criterion 2

/// Independent quadratic-time oracle: integer squared distance to the
/// nearest pixel outside the instance, then the same normalization float
/// expression as production so equality can be exact.
fn brute_force_distmap(labels: &LabelMap) -> DistMap {
    let (h, w) = (labels.height, labels.width);
    let mut values = vec![0.0f64; h * w];
    for id in 1..=labels.num_instances() {
        let covers_all = labels.ids.iter().all(|&v| v == id);
        if covers_all {
            values.iter_mut().for_each(|v| *v = 1.0);
            continue;
        }
        let mut sq = vec![i64::MAX; h * w];
        let mut max_sq = 0i64;
        for r in 0..h {
            for c in 0..w {
                if labels.get(r, c) != id {
                    continue;
                }
                let mut best = i64::MAX;
                for qr in 0..h {
                    for qc in 0..w {
                        if labels.get(qr, qc) != id {
                            let dy = qr as i64 - r as i64;
                            let dx = qc as i64 - c as i64;
                            best = best.min(dy * dy + dx * dx);
                        }
                    }
                }
                sq[r * w + c] = best;
                max_sq = max_sq.max(best);
            }
        }
        let max_d = (max_sq as f64).sqrt();
        for i in 0..h * w {
            if labels.ids[i] == id {
                values[i] = (sq[i] as f64).sqrt() / max_d;
            }
        }
    }
    DistMap {
        height: h,
        width: w,
        values,
    }
}

#[test]
fn criterion_02_distance_transform_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    for case in 0..50u64 {
        let height = rng.gen_range(16..=64);
        let width = rng.gen_range(16..=64);
        // crowd in proportion to the raster so every layout stays feasible
        let cap = (height.min(width) / 12).clamp(1, 5);
        let cfg = SceneConfig {
            height,
            width,
            channels: 1,
            min_objects: 1,
            max_objects: cap,
            family: if case % 2 == 0 { ShapeFamily::Blobs } else { ShapeFamily::Rosette },
            margin: 1.0,
            noise: 0.0,
            seed: 0xC2_000 + case,
        };
        let (_, labels, _) = synth_generate(&cfg).unwrap();
        let fast = compute_distmap(&labels);
        let slow = brute_force_distmap(&labels);
        assert_eq!(
            fast.values, slow.values,
            "distance transform deviates from brute force on case {case}"
        );
    }
    println!("criterion 2 PASS: exact distance-transform equality on 50 random label maps");
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_clustering_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    for case in 0..20u64 {
        let cfg = SceneConfig {
            height: rng.gen_range(16..=32),
            width: rng.gen_range(16..=32),
            channels: 1,
            min_objects: 1,
            max_objects: 6,
            family: if case % 2 == 0 { ShapeFamily::Blobs } else { ShapeFamily::Rosette },
            margin: 1.0,
            noise: 0.0,
            seed: 0xC3_000 + case,
        };
        let (_, labels, _) = synth_generate(&cfg).unwrap();
        let c = labels.num_instances() as usize;
        // orthogonal basis: instance k on axis k, background on axis 0, so
        // every cross-instance angle is exactly 90 degrees
        let dim = c + 1;
        let mut emb = EmbeddingField::new(labels.height, labels.width, dim);
        for (i, &id) in labels.ids.iter().enumerate() {
            emb.data[i * dim + id as usize] = 1.0;
        }
        // one true seed per instance: the first pixel of each
        let mut seeds = Vec::new();
        let mut seen = vec![false; c + 1];
        for r in 0..labels.height {
            for col in 0..labels.width {
                let id = labels.get(r, col) as usize;
                if id != 0 && !seen[id] {
                    seen[id] = true;
                    seeds.push(Seed { row: r, col, value: 1.0 });
                }
            }
        }
        assert_eq!(seeds.len(), c);
        let cfg45 = ClusterConfig::default();
        assert_eq!(cfg45.delta_a_deg, 45.0);
        let result = angular_cluster(&emb, &seeds, &cfg45).unwrap();
        let sbd = symmetric_best_dice(&result.labels, &labels).unwrap();
        assert_eq!(sbd, 1.0, "fixture {case} not perfectly recovered");
    }
    println!("criterion 3 PASS: 20 orthogonal-embedding fixtures recovered at SBD = 1.0");
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_metric_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let a = random_labels(&mut rng, 8, 8, 3);
    let b = random_labels(&mut rng, 8, 8, 2);

    assert_eq!(symmetric_best_dice(&a, &a).unwrap(), 1.0);
    let ab = symmetric_best_dice(&a, &b).unwrap();
    let ba = symmetric_best_dice(&b, &a).unwrap();
    assert_eq!(ab, ba, "SBD must be symmetric");

    // cyclically permuting instance ids changes nothing
    let n = a.num_instances();
    let permuted = LabelMap::from_ids(
        a.height,
        a.width,
        a.ids.iter().map(|&v| if v == 0 { 0 } else { (v % n) + 1 }).collect(),
    )
    .unwrap();
    assert_eq!(symmetric_best_dice(&permuted, &b).unwrap(), ab);

    // two 4-pixel gt instances merged into one 8-pixel prediction: every
    // best dice involved is 2*4/(8+4) = 2/3
    let gt = LabelMap::from_ids(2, 4, vec![1, 1, 2, 2, 1, 1, 2, 2]).unwrap();
    let pred = LabelMap::from_ids(2, 4, vec![1; 8]).unwrap();
    let sbd = symmetric_best_dice(&pred, &gt).unwrap();
    assert!((sbd - 2.0 / 3.0).abs() <= 1e-9, "merge fixture gave {sbd}");

    // one gt instance, one prediction at IoU exactly 3/5: a true positive
    // at thresholds 0.5, 0.55, 0.6 and a miss above, so the mean over the
    // nine standard thresholds is 3/9
    let gt = LabelMap::from_ids(1, 6, vec![1, 1, 1, 1, 0, 0]).unwrap();
    let pred = LabelMap::from_ids(1, 6, vec![0, 1, 1, 1, 1, 0]).unwrap();
    let aps = ap_per_threshold(&pred, &gt, &default_iou_thresholds()).unwrap();
    let map: f64 = aps.iter().sum::<f64>() / aps.len() as f64;
    assert!((map - 3.0 / 9.0).abs() <= 1e-9, "mAP fixture gave {map}");
    println!("criterion 4 PASS: SBD identity/symmetry/permutation, merge 2/3, mAP 3/9");
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_loss_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let labels = random_labels(&mut rng, 8, 8, 3);
    let graph = global_graph(&labels);
    let cfg = LossConfig::default();

    // scale invariance on a random field: cosine ignores positive scale
    let mut emb = EmbeddingField::new(8, 8, 4);
    for v in &mut emb.data {
        *v = rng.gen_range(-1.0..1.0);
        if v.abs() < 0.1 {
            *v = 0.3;
        }
    }
    let base = embedding_loss(&emb, &labels, &graph, &cfg).unwrap();
    let mut scaled = emb.clone();
    for v in &mut scaled.data {
        *v *= 3.0;
    }
    let tripled = embedding_loss(&scaled, &labels, &graph, &cfg).unwrap();
    assert!(
        relative_error(base, tripled) <= 1e-6,
        "scaling embeddings changed the loss: {base} vs {tripled}"
    );

    // the intra term bottoms out at zero once every pixel sits on its mean,
    // and with orthogonal means the whole lambda=1 loss sits at zero
    let c = labels.num_instances() as usize;
    let mut aligned = EmbeddingField::new(8, 8, c + 1);
    for (i, &id) in labels.ids.iter().enumerate() {
        aligned.data[i * (c + 1) + id as usize] = 1.0;
    }
    let stats = instance_stats(&aligned, &labels).unwrap();
    assert!(intra_loss(&aligned, &labels, &stats, cfg.epsilon).abs() <= 1e-12);
    let total = embedding_loss(&aligned, &labels, &graph, &cfg).unwrap();
    assert!(total.abs() <= 1e-12, "orthogonal optimum has loss {total}");

    // strict minimum: two antipodal instances, each pixel on its mean; the
    // intra term is at its floor and the inter term at cosine -1, so every
    // gradient component must vanish
    let two = LabelMap::from_ids(
        4,
        4,
        vec![1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2],
    )
    .unwrap();
    let mut anti = EmbeddingField::new(4, 4, 3);
    for (i, &id) in two.ids.iter().enumerate() {
        anti.data[i * 3] = if id == 1 { 1.0 } else { -1.0 };
    }
    let two_graph = global_graph(&two);
    let grad = embedding_loss_grad(&anti, &two, &two_graph, &cfg).unwrap();
    let max_component = grad.data.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
    assert!(
        max_component <= 1e-8,
        "gradient at the strict minimum: {max_component}"
    );
    println!("criterion 5 PASS: scale invariance, zero at minima, vanishing gradient at optimum");
}

// ------------------------------------------------------- criteria 6-9 shared

struct FastRuns {
    unet_vs_wnet: ExperimentReport,
    local_vs_global: ExperimentReport,
    mechanism_best_cos: f64,
    consistency_lambda1: f64,
    consistency_lambda100: f64,
    inter_only_median_fraction: f64,
    clustering: ExperimentReport,
    wall_secs: f64,
}

const SEEDS: usize = 3;
const MASTER: u64 = 0;

fn fast_settings(out: PathBuf) -> AblateSettings {
    let mut base = TrainConfig::default();
    apply_fast_profile(&mut base);
    let mut synth = SynthConfig::default();
    apply_fast_synth_profile(&mut synth);
    AblateSettings {
        out_dir: out,
        fast: true,
        seeds: SEEDS,
        master_seed: MASTER,
        base,
        synth,
    }
}

/// Mean embedding-consistency of a trained model over its validation scenes,
/// plus the fraction of scenes above 0.5.
fn consistency_stats(outcome: &TrainOutcome<f32>, cfg: &TrainConfig, val: &[Scene]) -> (f64, f64) {
    let net = Network::new(cfg.topology.clone(), val[0].image.channels).unwrap();
    let mut scores = Vec::new();
    for scene in val {
        let (_, emb) = predict(&net, &outcome.params, &scene.image).unwrap();
        if let Some(c) = intra_consistency(&emb, &scene.labels).unwrap() {
            scores.push(c);
        }
    }
    assert!(!scores.is_empty());
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let frac = scores.iter().filter(|&&c| c > 0.5).count() as f64 / scores.len() as f64;
    (mean, frac)
}

fn fast_runs() -> &'static FastRuns {
    static RUNS: OnceLock<FastRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let started = Instant::now();
        let tmp = tempfile::tempdir().unwrap();

        let settings = fast_settings(tmp.path().join("uvw"));
        let unet_vs_wnet = run_experiment("unet_vs_wnet", &settings).unwrap();

        let settings = fast_settings(tmp.path().join("lvg"));
        let local_vs_global = run_experiment("local_vs_global", &settings).unwrap();

        // the crowding mechanism, observed directly: one global-constraint
        // training at E=4 on the same crowded-rosette data the experiment
        // uses, mean embeddings compared pairwise
        let mut crowded = settings.synth.clone();
        crowded.family = ShapeFamily::Rosette;
        crowded.min_objects = 6;
        crowded.max_objects = 8;
        crowded.height = crowded.height.max(48);
        crowded.width = crowded.width.max(48);
        crowded.seed = dataset_seed(MASTER, 0);
        let (train_scenes, val_scenes) = generate_dataset(&crowded).unwrap();
        let mut global_cfg = settings.base.clone();
        global_cfg.topology.embedding_dim = 4;
        global_cfg.global_constraints = true;
        global_cfg.seed = train_seed(MASTER, 0);
        let outcome: TrainOutcome<f32> = train(&train_scenes, &val_scenes, &global_cfg).unwrap();
        assert!(outcome.aborted.is_none(), "mechanism training aborted");
        let net = Network::new(global_cfg.topology.clone(), val_scenes[0].image.channels).unwrap();
        let mut best = -1.0f64;
        for scene in &val_scenes {
            if (scene.labels.num_instances() as usize) < 6 {
                continue;
            }
            let (_, emb) = predict(&net, &outcome.params, &scene.image).unwrap();
            let stats = instance_stats(&emb, &scene.labels).unwrap();
            for i in 0..stats.means.len() {
                for j in i + 1..stats.means.len() {
                    best = best.max(cosine_similarity(&stats.means[i], &stats.means[j], 1e-8));
                }
            }
        }
        let mechanism_best_cos = best;

        // lambda-sensitivity trainings on the default fast data
        let base_settings = fast_settings(tmp.path().join("lam"));
        let mut lam1 = Vec::new();
        let mut lam100 = Vec::new();
        let mut inter_frac = Vec::new();
        for k in 0..SEEDS {
            let mut synth_k = base_settings.synth.clone();
            synth_k.seed = dataset_seed(MASTER, k);
            let (tr, va) = generate_dataset(&synth_k).unwrap();
            for (lambda, intra, bucket) in
                [(1.0, true, 0usize), (100.0, true, 1), (1.0, false, 2)]
            {
                let mut cfg = base_settings.base.clone();
                cfg.loss.lambda = lambda;
                cfg.loss.include_intra = intra;
                cfg.seed = train_seed(MASTER, k);
                let outcome: TrainOutcome<f32> = train(&tr, &va, &cfg).unwrap();
                assert!(outcome.aborted.is_none(), "lambda training aborted");
                let (mean, frac) = consistency_stats(&outcome, &cfg, &va);
                match bucket {
                    0 => lam1.push(mean),
                    1 => lam100.push(mean),
                    _ => inter_frac.push(frac),
                }
            }
        }

        let settings = fast_settings(tmp.path().join("cc"));
        let clustering = run_experiment("clustering_compare", &settings).unwrap();

        FastRuns {
            unet_vs_wnet,
            local_vs_global,
            mechanism_best_cos,
            consistency_lambda1: median(&lam1),
            consistency_lambda100: median(&lam100),
            inter_only_median_fraction: median(&inter_frac),
            clustering,
            wall_secs: started.elapsed().as_secs_f64(),
        }
    })
}

fn row_msbd(report: &ExperimentReport, name: &str) -> f64 {
    report
        .rows
        .iter()
        .find(|r| r.config == name)
        .unwrap_or_else(|| panic!("row {name} missing"))
        .msbd
}

#[test]
fn criterion_06_wnet_vs_unet_direction() {
    let runs = fast_runs();
    let wnet = row_msbd(&runs.unet_vs_wnet, "wnet_dfeat32");
    let unet = row_msbd(&runs.unet_vs_wnet, "unet_two_head");
    assert!(wnet >= unet, "median mSBD: wnet {wnet} should be >= unet {unet}");
    assert!(
        runs.wall_secs <= 900.0,
        "trend suite took {:.0}s, budget is 900s",
        runs.wall_secs
    );
    println!("criterion 6 PASS: wnet {wnet:.3} >= unet {unet:.3} (median of {SEEDS} seeds)");
}

#[test]
fn criterion_07_local_vs_global_direction() {
    let runs = fast_runs();
    let local = row_msbd(&runs.local_vs_global, "local");
    let global = row_msbd(&runs.local_vs_global, "global");
    assert!(local > global, "median mSBD: local {local} should be > global {global}");
    let cos45 = 45f64.to_radians().cos();
    assert!(
        runs.mechanism_best_cos >= cos45,
        "expected a ground-truth pair within 45 degrees under global constraints at E=4, \
         best cosine {}",
        runs.mechanism_best_cos
    );
    println!(
        "criterion 7 PASS: local {local:.3} > global {global:.3}; closest global-constraint pair {:.1} degrees apart",
        runs.mechanism_best_cos.clamp(-1.0, 1.0).acos().to_degrees()
    );
}

#[test]
fn criterion_08_lambda_consistency_direction() {
    let runs = fast_runs();
    assert!(
        runs.consistency_lambda100 < runs.consistency_lambda1,
        "consistency at lambda=100 ({}) should sit below lambda=1 ({})",
        runs.consistency_lambda100,
        runs.consistency_lambda1
    );
    assert!(
        runs.inter_only_median_fraction >= 0.5,
        "inter-only training should keep consistency above 0.5 on at least half the \
         validation images, got fraction {}",
        runs.inter_only_median_fraction
    );
    println!(
        "criterion 8 PASS: consistency lambda=100 {:.3} < lambda=1 {:.3}; inter-only fraction {:.2}",
        runs.consistency_lambda100, runs.consistency_lambda1, runs.inter_only_median_fraction
    );
}

#[test]
fn criterion_09_angular_vs_mean_shift_direction() {
    let runs = fast_runs();
    let angular = row_msbd(&runs.clustering, "angular");
    let mean_shift = row_msbd(&runs.clustering, "mean_shift");
    assert!(
        angular >= mean_shift,
        "median mSBD: angular {angular} should be >= mean shift {mean_shift}"
    );
    println!("criterion 9 PASS: angular {angular:.3} >= mean shift {mean_shift:.3}");
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_learning_rate_schedule() {
    let cfg = TrainConfig::default();
    for (step, expect) in [(0u64, 1e-4), (5000, 9e-5), (10000, 8.1e-5)] {
        let got = lr_at(step, &cfg);
        assert!(
            relative_error(got, expect) <= 1e-12,
            "lr_at({step}) = {got}, expected {expect}"
        );
    }
    println!("criterion 10 PASS: decay schedule hits 1e-4 / 9e-5 / 8.1e-5 exactly");
}

// --------------------------------------------------------------- criterion 11

#[test]
fn criterion_11_ablate_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &std::path::Path| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_embedseg"))
            .args([
                "ablate",
                "all",
                "--fast",
                "--seeds",
                "1",
                "--steps",
                "60",
                "--master-seed",
                "123",
                "--out",
            ])
            .arg(dir)
            .output()
            .expect("ablate binary runs");
        assert!(
            out.status.success(),
            "ablate all failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);

    let mut compared = 0;
    for name in EXPERIMENT_NAMES {
        let rel = format!("{name}/results.csv");
        let x = std::fs::read(a.join(&rel)).unwrap();
        let y = std::fs::read(b.join(&rel)).unwrap();
        assert_eq!(x, y, "{rel} differs between identical master seeds");
        compared += 1;
    }
    let x = std::fs::read(a.join("summary.csv")).unwrap();
    let y = std::fs::read(b.join("summary.csv")).unwrap();
    assert_eq!(x, y, "summary.csv differs between identical master seeds");
    println!("criterion 11 PASS: {compared} experiment tables plus the summary byte-identical");
}
