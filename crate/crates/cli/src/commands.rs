//! One function per CLI verb. Each takes parsed arguments, does the work,
//! prints a short human summary to stdout and returns errors for main to
//! map onto exit codes.

use std::path::{Path, PathBuf};

use clap::Args;

use embedseg_core::datagen::{png_io, ShapeFamily};
use embedseg_core::metrics::{
    ap_per_threshold, default_iou_thresholds, map_iou, symmetric_best_dice,
};
use embedseg_core::nnet::{load_checkpoint, save_checkpoint, Network};
use embedseg_core::trainer::{train, write_metrics_csv, TrainOutcome};

use crate::config::{
    apply_fast_synth_profile, load_json, resolve_train_config, SynthConfig, TrainOverrides,
};
use crate::data::{
    load_dataset, resolve_out_dir, save_distmap, save_embeddings, write_dataset,
};
use crate::errors::{CliError, CliResult};
use crate::experiments::{
    run_experiment, write_experiment_index, AblateSettings, ExperimentReport, EXPERIMENT_NAMES,
};
use crate::pipeline::{segment_with_method, ClusterMethod};

fn parse_family(s: &str) -> CliResult<ShapeFamily> {
    match s {
        "rosette" => Ok(ShapeFamily::Rosette),
        "blobs" => Ok(ShapeFamily::Blobs),
        other => Err(CliError::usage(format!(
            "unknown shape family '{other}' (expected rosette or blobs)"
        ))),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with generator settings; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $EMBEDSEG_OUT/synth or ./out/synth)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Small scenes, few of them
    #[arg(long)]
    pub fast: bool,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    /// rosette | blobs
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
}

pub fn run_synth(args: &SynthArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => SynthConfig::default(),
    };
    if args.fast {
        apply_fast_synth_profile(&mut cfg);
    }
    if let Some(v) = args.scenes {
        cfg.scenes = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.min_objects {
        cfg.min_objects = v;
    }
    if let Some(v) = args.max_objects {
        cfg.max_objects = v;
    }
    if let Some(f) = &args.family {
        cfg.family = parse_family(f)?;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    let dir = resolve_out_dir(args.out.clone(), "synth");
    let manifest = write_dataset(&cfg, &dir)?;
    let (train_count, val_count) = cfg.split();
    println!(
        "wrote {} scenes ({train_count} train / {val_count} val) to {}",
        manifest.scenes.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `synth`
    pub data: PathBuf,
    /// JSON file with training settings; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $EMBEDSEG_OUT/train or ./out/train)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tiny network and short schedule
    #[arg(long)]
    pub fast: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

pub fn run_train(args: &TrainArgs) -> CliResult<()> {
    let (train_scenes, val_scenes, _) = load_dataset(&args.data)?;
    let cfg = resolve_train_config(args.config.as_deref(), args.fast, &args.overrides)?;
    let out = resolve_out_dir(args.out.clone(), "train");
    std::fs::create_dir_all(&out)?;

    let outcome: TrainOutcome<f32> = train(&train_scenes, &val_scenes, &cfg)?;

    let channels = train_scenes[0].image.channels;
    save_checkpoint(out.join("checkpoint"), &cfg.topology, channels, &outcome.params)?;
    let mut csv = Vec::new();
    write_metrics_csv(&outcome.log, &mut csv)?;
    std::fs::write(out.join("metrics.csv"), csv)?;
    std::fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;

    let val_str = outcome
        .final_val_msbd()
        .map(|v| v.to_string())
        .unwrap_or_else(|| "n/a".into());
    println!(
        "trained {} steps over {} epochs, final val msbd {val_str}, artifacts in {}",
        outcome.steps,
        outcome.log.len(),
        out.display()
    );
    match outcome.aborted {
        // artifacts from the last healthy state are already on disk
        Some(reason) => Err(CliError::runtime(format!("training aborted: {reason}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint directory written by `train`
    pub checkpoint: PathBuf,
    /// Input image PNG
    pub image: PathBuf,
    /// Output directory (default: $EMBEDSEG_OUT/predict or ./out/predict)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Foreground mask PNG; predicted labels outside it are discarded
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// angular | mean_shift
    #[arg(long, default_value = "angular")]
    pub method: String,
    #[arg(long)]
    pub delta_a: Option<f64>,
    #[arg(long)]
    pub seed_threshold: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

pub fn run_predict(args: &PredictArgs) -> CliResult<()> {
    let (spec, in_channels, params) = load_checkpoint::<f32>(&args.checkpoint)?;
    let net = Network::new(spec, in_channels)?;
    let image = png_io::load_image(&args.image)?;
    if image.channels != in_channels {
        return Err(CliError::usage(format!(
            "checkpoint expects {in_channels}-channel images, {} has {}",
            args.image.display(),
            image.channels
        )));
    }
    let mask = match &args.mask {
        Some(path) => Some(png_io::load_mask(path)?),
        None => None,
    };
    let method: ClusterMethod = args.method.parse()?;
    let mut cluster = embedseg_core::clusterer::ClusterConfig::default();
    if let Some(v) = args.delta_a {
        cluster.delta_a_deg = v;
    }
    if let Some(v) = args.seed_threshold {
        cluster.threshold_frac = v;
    }
    if let Some(v) = args.window {
        cluster.window = v;
    }
    if let Some(v) = args.bandwidth {
        cluster.bandwidth = v;
    }
    cluster.validate()?;

    let out = resolve_out_dir(args.out.clone(), "predict");
    std::fs::create_dir_all(&out)?;
    let (dist, emb) = embedseg_core::trainer::predict(&net, &params, &image)?;
    save_distmap(&dist, &out.join("distmap.bin"))?;
    save_embeddings(&emb, &out.join("embeddings.bin"))?;
    let result = segment_with_method(&net, &params, &image, mask.as_ref(), &cluster, method)?;
    png_io::save_label_map(&result.labels, out.join("labels.png"))?;
    println!(
        "segmented {} into {} instances ({} px unassigned), outputs in {}",
        args.image.display(),
        result.labels.num_instances(),
        result.unassigned,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted label PNGs
    pub pred: PathBuf,
    /// Directory of reference label PNGs with matching file names
    pub gt: PathBuf,
    /// Output directory (default: $EMBEDSEG_OUT/eval or ./out/eval)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const AP_DEFINITION: &str =
    "ap at threshold t = TP/(TP+FP+FN) with greedy one-to-one IoU matching";

fn png_names(dir: &Path) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn run_eval(args: &EvalArgs) -> CliResult<()> {
    let names = png_names(&args.pred)?;
    if names.is_empty() {
        return Err(CliError::usage(format!(
            "no label PNGs found in {}",
            args.pred.display()
        )));
    }
    let thresholds = default_iou_thresholds();
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for name in &names {
        let gt_path = args.gt.join(name);
        if !gt_path.exists() {
            return Err(CliError::usage(format!(
                "{} has no counterpart in {}",
                name,
                args.gt.display()
            )));
        }
        let (pred, _) = png_io::load_label_map(args.pred.join(name))?;
        let (gt, _) = png_io::load_label_map(gt_path)?;
        preds.push(pred);
        gts.push(gt);
    }

    let mut report = format!("# {AP_DEFINITION}\n");
    report.push_str("image,sbd");
    for t in &thresholds {
        report.push_str(&format!(",ap{:.0}", t * 100.0));
    }
    report.push('\n');
    let mut sbd_sum = 0.0;
    for ((name, pred), gt) in names.iter().zip(&preds).zip(&gts) {
        let sbd = symmetric_best_dice(pred, gt)?;
        sbd_sum += sbd;
        let aps = ap_per_threshold(pred, gt, &thresholds)?;
        report.push_str(&format!("{name},{sbd}"));
        for ap in aps {
            report.push_str(&format!(",{ap}"));
        }
        report.push('\n');
    }
    let pairs: Vec<_> = preds.iter().zip(gts.iter()).collect();
    let msbd = sbd_sum / names.len() as f64;
    let map = map_iou(&pairs, &thresholds)?;

    let out = resolve_out_dir(args.out.clone(), "eval");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.csv"), report)?;
    let summary = serde_json::json!({
        "msbd": msbd,
        "map": map,
        "images": names.len(),
        "ap_definition": AP_DEFINITION,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("evaluated {} images: msbd {msbd}, map {map}", names.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Experiment name, or `all` to run the whole suite
    pub experiment: String,
    /// Output root (default: $EMBEDSEG_OUT/ablate or ./out/ablate)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tiny networks, short schedules, small scenes
    #[arg(long)]
    pub fast: bool,
    /// Replicate runs per configuration
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Seeds data generation and training for the whole suite
    #[arg(long, default_value_t = 0)]
    pub master_seed: u64,
    /// JSON file with the base training settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON file with the data generator settings
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

pub fn run_ablate(args: &AblateArgs) -> CliResult<()> {
    let base = resolve_train_config(args.config.as_deref(), args.fast, &args.overrides)?;
    let mut synth: SynthConfig = match &args.synth_config {
        Some(path) => load_json(path)?,
        None => SynthConfig::default(),
    };
    if args.fast {
        apply_fast_synth_profile(&mut synth);
    }
    synth.validate()?;
    let root = resolve_out_dir(args.out.clone(), "ablate");

    let names: Vec<&str> = if args.experiment == "all" {
        EXPERIMENT_NAMES.to_vec()
    } else {
        vec![args.experiment.as_str()]
    };
    let mut reports: Vec<ExperimentReport> = Vec::new();
    for name in names {
        let settings = AblateSettings {
            out_dir: root.join(name),
            fast: args.fast,
            seeds: args.seeds,
            master_seed: args.master_seed,
            base: base.clone(),
            synth: synth.clone(),
        };
        let report = run_experiment(name, &settings)?;
        println!("{name}:");
        for row in &report.rows {
            println!("  {:<24} msbd {:.4}  map {:.4}", row.config, row.msbd, row.map);
        }
        reports.push(report);
    }
    if args.experiment == "all" {
        write_experiment_index(&root, &reports)?;
    }
    println!("results in {}", root.display());
    Ok(())
}
