//! End-to-end flow through the public library surface: synthesize scenes,
//! train briefly, round-trip the checkpoint through disk, and segment —
//! asserting the structural contracts that hold regardless of model quality.

use embedseg_core::datagen::{synth_generate, SceneConfig, ShapeFamily};
use embedseg_core::distfield::{compute_distmap, extract_seeds};
use embedseg_core::metrics::symmetric_best_dice;
use embedseg_core::nnet::{load_checkpoint, save_checkpoint, Network};
use embedseg_core::trainer::{predict, segment_image, train, Scene, TrainConfig};

fn tiny_scenes(count: usize, base_seed: u64) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            let cfg = SceneConfig {
                height: 16,
                width: 16,
                channels: 1,
                min_objects: 2,
                max_objects: 3,
                family: ShapeFamily::Blobs,
                margin: 1.0,
                noise: 0.01,
                seed: base_seed + i as u64,
            };
            let (image, labels, mask) = synth_generate(&cfg).unwrap();
            Scene::new(image, labels, mask).unwrap()
        })
        .collect()
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        max_steps: 6,
        batch_size: 2,
        val_every: 1,
        ..Default::default()
    };
    cfg.topology.depth = 1;
    cfg.topology.base = 4;
    cfg.topology.feature_width = 8;
    cfg.topology.embedding_dim = 4;
    cfg.cluster.window = 2;
    cfg
}

#[test]
fn train_checkpoint_predict_round_trip() {
    let train_scenes = tiny_scenes(4, 100);
    let val_scenes = tiny_scenes(2, 900);
    let cfg = tiny_config();

    let outcome = train::<f32>(&train_scenes, &val_scenes, &cfg).unwrap();
    assert!(outcome.aborted.is_none());
    assert_eq!(outcome.steps, 6);
    assert!(!outcome.log.is_empty());
    assert!(outcome.final_val_msbd().is_some());

    let dir = tempfile::tempdir().unwrap();
    let channels = train_scenes[0].image.channels;
    save_checkpoint(dir.path(), &cfg.topology, channels, &outcome.params).unwrap();
    let (spec, loaded_channels, params) = load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(loaded_channels, channels);
    assert_eq!(spec.embedding_dim, cfg.topology.embedding_dim);

    // reloaded weights must predict bit-identically
    let net = Network::new(spec, channels).unwrap();
    let scene = &val_scenes[0];
    let (dist_a, emb_a) = predict(&net, &outcome.params, &scene.image).unwrap();
    let (dist_b, emb_b) = predict(&net, &params, &scene.image).unwrap();
    assert_eq!(dist_a.values, dist_b.values);
    assert_eq!(emb_a.data, emb_b.data);

    // embedding norms are 1 wherever the raster is, by construction
    for px in emb_a.data.chunks_exact(emb_a.dim) {
        let norm: f64 = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-5, "pixel norm {norm}");
    }

    // segmentation stays inside the foreground and produces canonical ids
    let seg = segment_image(&net, &params, &scene.image, Some(&scene.mask), &cfg.cluster).unwrap();
    assert!(seg.labels.is_canonical());
    for (idx, &id) in seg.labels.ids.iter().enumerate() {
        if id != 0 {
            let (r, c) = (idx / seg.labels.width, idx % seg.labels.width);
            assert!(scene.mask.get(r, c), "instance pixel outside the mask");
        }
    }
    // the score is a valid dice value against ground truth
    let sbd = symmetric_best_dice(&seg.labels, &scene.labels).unwrap();
    assert!((0.0..=1.0).contains(&sbd));
}

#[test]
fn distance_targets_seed_every_instance_of_clean_scenes() {
    for seed in 0..5u64 {
        let cfg = SceneConfig {
            height: 24,
            width: 24,
            channels: 1,
            min_objects: 2,
            max_objects: 3,
            family: ShapeFamily::Blobs,
            margin: 2.0,
            noise: 0.0,
            seed: 4000 + seed,
        };
        let (_, labels, _) = synth_generate(&cfg).unwrap();
        let dist = compute_distmap(&labels);
        let seeds = extract_seeds(&dist, 0.7, 2).unwrap();
        // with well-separated blobs, the ground-truth distance ridge yields
        // at least one seed per instance and none on the background
        assert!(seeds.len() >= labels.num_instances() as usize);
        for s in &seeds {
            assert_ne!(labels.get(s.row, s.col), 0, "seed on background");
        }
    }
}

#[test]
fn training_rejects_inconsistent_inputs() {
    let cfg = tiny_config();
    assert!(train::<f32>(&[], &[], &cfg).is_err());

    let mut bad = tiny_config();
    bad.base_lr = -1.0;
    let scenes = tiny_scenes(2, 77);
    assert!(train::<f32>(&scenes, &[], &bad).is_err());

    let mut bad_topo = tiny_config();
    bad_topo.topology.embedding_dim = 1;
    assert!(train::<f32>(&scenes, &[], &bad_topo).is_err());

    let mut bad_cluster = tiny_config();
    bad_cluster.cluster.delta_a_deg = 120.0;
    let net = Network::new(tiny_config().topology, 1).unwrap();
    let params = net.init_params::<f32>(0);
    assert!(
        segment_image(&net, &params, &scenes[0].image, None, &bad_cluster.cluster).is_err()
    );
}
