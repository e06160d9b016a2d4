//! Ablation harness: each named experiment trains a grid of configurations
//! on shared per-seed datasets and reports per-configuration median scores.
//!
//! Scores land in `results.csv` (fully deterministic for a fixed master
//! seed); wall-clock numbers go to a separate `timings.json` so rerunning
//! never perturbs the comparison table itself.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use embedseg_core::nnet::{ConcatVariant, NetKind};
use embedseg_core::trainer::{train, Scene, TrainConfig, TrainOutcome};

use crate::config::SynthConfig;
use crate::data::generate_dataset;
use crate::errors::{CliError, CliResult};
use crate::pipeline::{eval_outcome, ClusterMethod};
use crate::svg;

pub const EXPERIMENT_NAMES: [&str; 6] = [
    "unet_vs_wnet",
    "concat_variants",
    "local_vs_global",
    "dim_sweep",
    "lambda_sweep",
    "clustering_compare",
];

#[derive(Debug, Clone)]
pub struct AblateSettings {
    pub out_dir: PathBuf,
    pub fast: bool,
    pub seeds: usize,
    pub master_seed: u64,
    pub base: TrainConfig,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone)]
struct RowSpec {
    name: String,
    train: TrainConfig,
    method: ClusterMethod,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RowResult {
    pub config: String,
    pub msbd: f64,
    pub map: f64,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<RowResult>,
    pub timings: BTreeMap<String, f64>,
}

/// Middle element for odd counts, mean of the two middles for even ones.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median over non-finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn wnet_row(base: &TrainConfig, name: &str, concat: ConcatVariant) -> RowSpec {
    let mut cfg = base.clone();
    cfg.topology.kind = NetKind::Wnet;
    cfg.topology.concat = concat;
    RowSpec {
        name: name.to_string(),
        train: cfg,
        method: ClusterMethod::Angular,
    }
}

/// The grid for one experiment plus the synthetic-data settings it runs on.
fn experiment_rows(name: &str, settings: &AblateSettings) -> CliResult<(Vec<RowSpec>, SynthConfig)> {
    let base = &settings.base;
    let mut synth = settings.synth.clone();
    let rows = match name {
        "unet_vs_wnet" => {
            let mut unet = base.clone();
            unet.topology.kind = NetKind::UnetTwoHead;
            unet.topology.concat = ConcatVariant::None;
            vec![
                RowSpec {
                    name: "unet_two_head".into(),
                    train: unet,
                    method: ClusterMethod::Angular,
                },
                wnet_row(base, "wnet_dfeat32", ConcatVariant::DFeat(32)),
            ]
        }
        "concat_variants" => [
            ConcatVariant::None,
            ConcatVariant::Coord,
            ConcatVariant::DistMap,
            ConcatVariant::DFeat(8),
            ConcatVariant::DFeat(32),
            ConcatVariant::EFeat(32),
            ConcatVariant::DFeatEFeat(16, 16),
        ]
        .into_iter()
        .map(|variant| wnet_row(base, &variant.to_string(), variant))
        .collect(),
        "local_vs_global" => {
            // low-dimensional embeddings on crowded rosettes, where pulling
            // every instance pair apart at once has too few directions
            synth.family = embedseg_core::datagen::ShapeFamily::Rosette;
            synth.min_objects = 6;
            synth.max_objects = 8;
            synth.height = synth.height.max(48);
            synth.width = synth.width.max(48);
            let mut local = base.clone();
            local.topology.embedding_dim = 4;
            local.global_constraints = false;
            // petals of one rosette all meet at the hub, so a wide radius
            // degenerates to the complete graph; 2 px keeps only touching
            // neighbors
            local.neighbor_radius = Some(2);
            let mut global = local.clone();
            global.global_constraints = true;
            vec![
                RowSpec {
                    name: "local".into(),
                    train: local,
                    method: ClusterMethod::Angular,
                },
                RowSpec {
                    name: "global".into(),
                    train: global,
                    method: ClusterMethod::Angular,
                },
            ]
        }
        "dim_sweep" => [4usize, 8, 16, 32, 64]
            .into_iter()
            .map(|dim| {
                let mut cfg = base.clone();
                cfg.topology.embedding_dim = dim;
                if !settings.fast && dim >= 32 {
                    // high-dimensional fields need the smaller batch to fit
                    // the same memory envelope
                    cfg.batch_size = cfg.batch_size.min(2);
                }
                RowSpec {
                    name: format!("dim_{dim}"),
                    train: cfg,
                    method: ClusterMethod::Angular,
                }
            })
            .collect(),
        "lambda_sweep" => {
            let mut rows: Vec<RowSpec> = [0.5, 1.0, 10.0, 100.0, 500.0]
                .into_iter()
                .map(|lambda| {
                    let mut cfg = base.clone();
                    cfg.loss.lambda = lambda;
                    cfg.loss.include_intra = true;
                    RowSpec {
                        name: format!("lambda_{lambda}"),
                        train: cfg,
                        method: ClusterMethod::Angular,
                    }
                })
                .collect();
            let mut only = base.clone();
            only.loss.include_intra = false;
            rows.push(RowSpec {
                name: "inter_only".into(),
                train: only,
                method: ClusterMethod::Angular,
            });
            rows
        }
        "clustering_compare" => {
            let shared = base.clone();
            vec![
                RowSpec {
                    name: "angular".into(),
                    train: shared.clone(),
                    method: ClusterMethod::Angular,
                },
                RowSpec {
                    name: "mean_shift".into(),
                    train: shared,
                    method: ClusterMethod::MeanShift,
                },
            ]
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown experiment '{other}' (expected one of {})",
                EXPERIMENT_NAMES.join(", ")
            )))
        }
    };
    Ok((rows, synth))
}

/// Data seed for replicate `seed_idx`; every configuration in an experiment
/// shares it, so comparisons are paired.
pub fn dataset_seed(master: u64, seed_idx: usize) -> u64 {
    master.wrapping_add(1009 * (seed_idx as u64 + 1))
}

/// Weight-init/shuffle seed for replicate `seed_idx`.
pub fn train_seed(master: u64, seed_idx: usize) -> u64 {
    master.wrapping_add(seed_idx as u64)
}

/// Runs every configuration of `name` over `settings.seeds` replicate
/// datasets and writes results.csv / timings.json / (for sweeps) plot.svg
/// into the output directory. Partial results are still written when a
/// sub-run fails.
pub fn run_experiment(name: &str, settings: &AblateSettings) -> CliResult<ExperimentReport> {
    let (rows, synth) = experiment_rows(name, settings)?;
    if settings.seeds == 0 {
        return Err(CliError::usage("ablate needs at least one seed"));
    }
    std::fs::create_dir_all(&settings.out_dir)?;

    // replicate datasets, shared by every configuration within a seed index
    let mut datasets: Vec<(Vec<Scene>, Vec<Scene>)> = Vec::with_capacity(settings.seeds);
    for k in 0..settings.seeds {
        let mut synth_k = synth.clone();
        synth_k.seed = dataset_seed(settings.master_seed, k);
        datasets.push(generate_dataset(&synth_k)?);
    }

    let mut report = ExperimentReport {
        name: name.to_string(),
        rows: Vec::with_capacity(rows.len()),
        timings: BTreeMap::new(),
    };
    // identical train configs (clustering_compare) reuse one training per seed
    let mut cache: HashMap<String, TrainOutcome<f32>> = HashMap::new();

    for row in &rows {
        let started = Instant::now();
        let mut msbd_runs = Vec::with_capacity(settings.seeds);
        let mut map_runs = Vec::with_capacity(settings.seeds);
        for (k, (train_scenes, val_scenes)) in datasets.iter().enumerate() {
            let mut cfg = row.train.clone();
            cfg.seed = train_seed(settings.master_seed, k);
            let key = format!("{k}:{}", serde_json::to_string(&cfg)?);
            if !cache.contains_key(&key) {
                let fresh = train::<f32>(train_scenes, val_scenes, &cfg).map_err(|e| {
                    sub_run_failure(&report, settings, &row.name, k, &e.to_string())
                })?;
                if let Some(reason) = &fresh.aborted {
                    return Err(sub_run_failure(&report, settings, &row.name, k, reason));
                }
                cache.insert(key.clone(), fresh);
            }
            let outcome = &cache[&key];
            let scores = eval_outcome(outcome, &cfg, val_scenes, row.method).map_err(|e| {
                sub_run_failure(&report, settings, &row.name, k, &e.to_string())
            })?;
            msbd_runs.push(scores.msbd);
            map_runs.push(scores.map);
        }
        report.rows.push(RowResult {
            config: row.name.clone(),
            msbd: median(&msbd_runs),
            map: median(&map_runs),
        });
        report
            .timings
            .insert(row.name.clone(), started.elapsed().as_secs_f64());
    }

    write_report(&report, settings)?;
    Ok(report)
}

fn sub_run_failure(
    partial: &ExperimentReport,
    settings: &AblateSettings,
    row: &str,
    seed_idx: usize,
    reason: &str,
) -> CliError {
    // best effort: keep whatever configurations already finished
    let _ = write_report(partial, settings);
    CliError::runtime(format!(
        "experiment {} failed at configuration '{row}' (seed index {seed_idx}): {reason}; \
         partial results saved to {}",
        partial.name,
        settings.out_dir.display()
    ))
}

pub fn results_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("config,msbd,map\n");
    for row in &report.rows {
        out.push_str(&format!("{},{},{}\n", row.config, row.msbd, row.map));
    }
    out
}

fn write_report(report: &ExperimentReport, settings: &AblateSettings) -> CliResult<()> {
    let dir = &settings.out_dir;
    std::fs::write(dir.join("results.csv"), results_csv(report))?;
    let timings = serde_json::to_string_pretty(&report.timings)?;
    std::fs::write(dir.join("timings.json"), timings)?;
    if let Some((points, x_label)) = sweep_points(report) {
        let chart = svg::line_chart(&report.name, x_label, "msbd", &points);
        std::fs::write(dir.join("plot.svg"), chart)?;
    }
    Ok(())
}

/// Sweep experiments get an mSBD-versus-variable line chart; comparison
/// tables don't.
fn sweep_points(report: &ExperimentReport) -> Option<(Vec<(f64, f64)>, &'static str)> {
    match report.name.as_str() {
        "dim_sweep" => {
            let pts = report
                .rows
                .iter()
                .filter_map(|r| {
                    let dim: f64 = r.config.strip_prefix("dim_")?.parse().ok()?;
                    Some((dim, r.msbd))
                })
                .collect();
            Some((pts, "embedding dimension"))
        }
        "lambda_sweep" => {
            let pts = report
                .rows
                .iter()
                .filter_map(|r| {
                    // inter_only has no λ coordinate, so it stays off the chart
                    let lambda: f64 = r.config.strip_prefix("lambda_")?.parse().ok()?;
                    Some((lambda.log10(), r.msbd))
                })
                .collect();
            Some((pts, "log10 lambda"))
        }
        _ => None,
    }
}

pub fn write_experiment_index(dir: &Path, reports: &[ExperimentReport]) -> CliResult<()> {
    let mut out = String::from("experiment,config,msbd,map\n");
    for report in reports {
        for row in &report.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                report.name, row.config, row.msbd, row.map
            ));
        }
    }
    std::fs::write(dir.join("summary.csv"), out)?;
    Ok(())
}
