//! Glue between a trained checkpoint and the evaluation metrics: run the
//! chosen clustering method over scenes and score the results.

use std::str::FromStr;

use embedseg_core::clusterer::{
    angular_cluster, apply_foreground_mask, mean_shift_cluster, ClusterConfig, SegmentationResult,
};
use embedseg_core::datagen::{ForegroundMask, Image};
use embedseg_core::distfield::extract_seeds;
use embedseg_core::metrics::{default_iou_thresholds, map_iou, msbd};
use embedseg_core::nnet::Network;
use embedseg_core::scalar::Scalar;
use embedseg_core::trainer::{predict, Scene, TrainConfig, TrainOutcome};
use embedseg_core::nnet::ModelParams;

use crate::errors::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMethod {
    Angular,
    MeanShift,
}

impl FromStr for ClusterMethod {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "angular" => Ok(ClusterMethod::Angular),
            "mean_shift" => Ok(ClusterMethod::MeanShift),
            other => Err(CliError::usage(format!(
                "unknown clustering method '{other}' (expected angular or mean_shift)"
            ))),
        }
    }
}

impl std::fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClusterMethod::Angular => "angular",
            ClusterMethod::MeanShift => "mean_shift",
        })
    }
}

/// Predict embeddings for `image` and cluster them with `method`. The mask,
/// when given, discards predicted labels outside the foreground.
pub fn segment_with_method<S: Scalar>(
    net: &Network,
    params: &ModelParams<S>,
    image: &Image,
    mask: Option<&ForegroundMask>,
    cluster: &ClusterConfig,
    method: ClusterMethod,
) -> CliResult<SegmentationResult> {
    let (dist, emb) = predict(net, params, image)?;
    let result = match method {
        ClusterMethod::Angular => {
            let seeds = extract_seeds(&dist, cluster.threshold_frac, cluster.window)?;
            let unmasked = angular_cluster(&emb, &seeds, cluster)?;
            match mask {
                Some(m) => apply_foreground_mask(&unmasked, m)?,
                None => unmasked,
            }
        }
        // mean shift takes the mask up front: only foreground pixels shift
        ClusterMethod::MeanShift => mean_shift_cluster(&emb, cluster, mask)?,
    };
    Ok(result)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EvalScores {
    pub msbd: f64,
    pub map: f64,
}

/// Segments every scene (using its ground-truth foreground mask) and scores
/// predictions against the reference labels.
pub fn evaluate_on<S: Scalar>(
    net: &Network,
    params: &ModelParams<S>,
    scenes: &[Scene],
    cluster: &ClusterConfig,
    method: ClusterMethod,
) -> CliResult<EvalScores> {
    if scenes.is_empty() {
        return Err(CliError::usage("evaluation needs at least one scene"));
    }
    let mut predictions = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let result =
            segment_with_method(net, params, &scene.image, Some(&scene.mask), cluster, method)?;
        predictions.push(result.labels);
    }
    let pairs: Vec<_> = predictions
        .iter()
        .zip(scenes.iter())
        .map(|(pred, scene)| (pred, &scene.labels))
        .collect();
    Ok(EvalScores {
        msbd: msbd(&pairs)?,
        map: map_iou(&pairs, &default_iou_thresholds())?,
    })
}

/// Scores a finished training run on `scenes`, rebuilding the network from
/// the topology it was trained with.
pub fn eval_outcome<S: Scalar>(
    outcome: &TrainOutcome<S>,
    cfg: &TrainConfig,
    scenes: &[Scene],
    method: ClusterMethod,
) -> CliResult<EvalScores> {
    let channels = scenes
        .first()
        .map(|s| s.image.channels)
        .ok_or_else(|| CliError::usage("evaluation needs at least one scene"))?;
    let net = Network::new(cfg.topology.clone(), channels)?;
    evaluate_on(&net, &outcome.params, scenes, &cfg.cluster, method)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing() {
        assert_eq!("angular".parse::<ClusterMethod>().unwrap(), ClusterMethod::Angular);
        assert_eq!(
            "mean_shift".parse::<ClusterMethod>().unwrap(),
            ClusterMethod::MeanShift
        );
        let err = "kmeans".parse::<ClusterMethod>().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert_eq!(ClusterMethod::MeanShift.to_string(), "mean_shift");
    }
}
