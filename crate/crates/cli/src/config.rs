//! Config resolution. Precedence everywhere: command-line flag > config
//! file > built-in default; `--fast` is a flag-level profile applied before
//! the individual flags so explicit values still win.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use embedseg_core::datagen::{SceneConfig, ShapeFamily};
use embedseg_core::nnet::{ConcatVariant, NetKind};
use embedseg_core::trainer::TrainConfig;

use crate::errors::{CliError, CliResult};

/// Dataset synthesis settings: one scene family, a size, and a split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub train_fraction: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub family: ShapeFamily,
    pub margin: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenes: 250,
            train_fraction: 0.8,
            height: 64,
            width: 64,
            channels: 1,
            min_objects: 3,
            max_objects: 8,
            family: ShapeFamily::Rosette,
            margin: 1.0,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.scenes == 0 {
            return Err(CliError::usage("scenes must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(CliError::usage(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        self.scene_config(0).validate()?;
        Ok(())
    }

    /// Per-scene generator config; scene index offsets the seed.
    pub fn scene_config(&self, index: usize) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            channels: self.channels,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            family: self.family,
            margin: self.margin,
            noise: self.noise,
            seed: self.seed.wrapping_add(index as u64),
        }
    }

    /// (train, val) scene counts. The default 250/0.8 gives 200/50.
    pub fn split(&self) -> (usize, usize) {
        let train = ((self.scenes as f64 * self.train_fraction).round() as usize)
            .clamp(1, self.scenes);
        (train, self.scenes - train)
    }
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Command-line overrides shared by `train` and `ablate`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// Training seed (controls init and batch order)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Global optimizer-step budget
    #[arg(long)]
    pub steps: Option<u64>,
    /// Epoch ceiling
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Images per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Initial learning rate
    #[arg(long = "lr")]
    pub base_lr: Option<f64>,
    /// Inter-instance loss weight
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Train the within-instance term (false = between-instance term only)
    #[arg(long)]
    pub include_intra: Option<bool>,
    /// Embedding dimension E
    #[arg(long = "dim")]
    pub embedding_dim: Option<usize>,
    /// Network kind: wnet | unet_two_head
    #[arg(long)]
    pub kind: Option<String>,
    /// Concat variant: none | coord | distmap | dfeat.J | efeat.K | dfeat.J+efeat.K
    #[arg(long)]
    pub concat: Option<String>,
    /// Block gradients through the concatenated features
    #[arg(long)]
    pub detach: Option<bool>,
    /// U-Net depth (pooling stages)
    #[arg(long)]
    pub depth: Option<usize>,
    /// Channels of the first encoder stage
    #[arg(long)]
    pub base: Option<usize>,
    /// Channels of the stage-one feature map
    #[arg(long)]
    pub feature_width: Option<usize>,
    /// Pixel radius for the local neighbor graph
    #[arg(long)]
    pub neighbor_radius: Option<usize>,
    /// Treat all instance pairs as neighbors
    #[arg(long = "global")]
    pub global_constraints: Option<bool>,
    /// Distance-only steps before the embedding loss joins
    #[arg(long)]
    pub pretrain_steps: Option<u64>,
    /// Epochs between validation passes
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Angular clustering margin, degrees
    #[arg(long)]
    pub delta_a: Option<f64>,
    /// Seed threshold as a fraction of the distance-map max
    #[arg(long)]
    pub seed_threshold: Option<f64>,
    /// Half-width of the seed local-maximum window
    #[arg(long)]
    pub window: Option<usize>,
    /// Staircase (floored) learning-rate decay
    #[arg(long)]
    pub staircase: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> CliResult<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = self.include_intra {
            cfg.loss.include_intra = v;
        }
        if let Some(v) = self.embedding_dim {
            cfg.topology.embedding_dim = v;
        }
        if let Some(kind) = &self.kind {
            cfg.topology.kind = parse_kind(kind)?;
        }
        if let Some(concat) = &self.concat {
            cfg.topology.concat = concat
                .parse::<ConcatVariant>()
                .map_err(|e| CliError::usage(e.to_string()))?;
        }
        if let Some(v) = self.detach {
            cfg.topology.detach_concat = v;
        }
        if let Some(v) = self.depth {
            cfg.topology.depth = v;
        }
        if let Some(v) = self.base {
            cfg.topology.base = v;
        }
        if let Some(v) = self.feature_width {
            cfg.topology.feature_width = v;
        }
        if let Some(v) = self.neighbor_radius {
            cfg.neighbor_radius = Some(v);
        }
        if let Some(v) = self.global_constraints {
            cfg.global_constraints = v;
        }
        if let Some(v) = self.pretrain_steps {
            cfg.pretrain_steps = v;
        }
        if let Some(v) = self.val_every {
            cfg.val_every = v;
        }
        if let Some(v) = self.delta_a {
            cfg.cluster.delta_a_deg = v;
        }
        if let Some(v) = self.seed_threshold {
            cfg.cluster.threshold_frac = v;
        }
        if let Some(v) = self.window {
            cfg.cluster.window = v;
        }
        if let Some(v) = self.staircase {
            cfg.staircase = v;
        }
        Ok(())
    }
}

pub fn parse_kind(s: &str) -> CliResult<NetKind> {
    match s {
        "wnet" => Ok(NetKind::Wnet),
        "unet_two_head" | "unet" => Ok(NetKind::UnetTwoHead),
        other => Err(CliError::usage(format!(
            "unknown network kind '{other}' (expected wnet or unet_two_head)"
        ))),
    }
}

/// Tiny-net profile backing the acceptance tests: 600 steps, narrow trunks,
/// a gently raised rate (1e-3 kills the ReLU distance head on these tiny
/// nets), and a seed window sized for 32 px scenes.
pub fn apply_fast_profile(cfg: &mut TrainConfig) {
    cfg.max_steps = 600;
    cfg.batch_size = 2;
    cfg.base_lr = 3e-4;
    cfg.topology.depth = 2;
    cfg.topology.base = 8;
    cfg.topology.feature_width = 16;
    cfg.val_every = 5;
    cfg.cluster.window = 2;
}

/// Matching dataset shrink for `--fast`: 32 px scenes, 24 train / 8 val.
pub fn apply_fast_synth_profile(cfg: &mut SynthConfig) {
    cfg.scenes = 32;
    cfg.train_fraction = 0.75;
    cfg.height = 32;
    cfg.width = 32;
}

/// file < fast < explicit flags.
pub fn resolve_train_config(
    file: Option<&Path>,
    fast: bool,
    overrides: &TrainOverrides,
) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match file {
        Some(path) => load_json(path)?,
        None => TrainConfig::default(),
    };
    if fast {
        apply_fast_profile(&mut cfg);
    }
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}
