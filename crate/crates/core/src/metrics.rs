//! Segmentation quality metrics: Dice, (symmetric) best Dice, dataset mSBD,
//! and IoU-thresholded counting average precision.

use crate::datagen::LabelMap;
use crate::error::{Error, Result};

/// Pairwise overlap counts between the instances of two label maps.
#[derive(Debug, Clone)]
pub struct MatchTable {
    pub ca: usize,
    pub cb: usize,
    /// intersection[a * cb + b] for instance ids a+1, b+1
    pub intersection: Vec<usize>,
    pub area_a: Vec<usize>,
    pub area_b: Vec<usize>,
}

impl MatchTable {
    pub fn build(la: &LabelMap, lb: &LabelMap) -> Result<Self> {
        if la.height != lb.height || la.width != lb.width {
            return Err(Error::shape_mismatch(
                "MatchTable::build",
                la.ids.len(),
                lb.ids.len(),
            ));
        }
        let ca = la.num_instances() as usize;
        let cb = lb.num_instances() as usize;
        let mut t = MatchTable {
            ca,
            cb,
            intersection: vec![0; ca * cb],
            area_a: vec![0; ca],
            area_b: vec![0; cb],
        };
        for (&a, &b) in la.ids.iter().zip(lb.ids.iter()) {
            if a != 0 {
                t.area_a[a as usize - 1] += 1;
            }
            if b != 0 {
                t.area_b[b as usize - 1] += 1;
            }
            if a != 0 && b != 0 {
                t.intersection[(a as usize - 1) * cb + (b as usize - 1)] += 1;
            }
        }
        Ok(t)
    }

    pub fn dice_at(&self, a: usize, b: usize) -> f64 {
        dice_counts(
            self.intersection[a * self.cb + b],
            self.area_a[a],
            self.area_b[b],
        )
    }

    pub fn iou_at(&self, a: usize, b: usize) -> f64 {
        let inter = self.intersection[a * self.cb + b];
        let union = self.area_a[a] + self.area_b[b] - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn dice_counts(intersection: usize, area_a: usize, area_b: usize) -> f64 {
    if area_a + area_b == 0 {
        return 0.0;
    }
    2.0 * intersection as f64 / (area_a + area_b) as f64
}

/// Dice overlap of two pixel sets given as masks over the same raster.
/// Two empty sets score 0.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape_mismatch("dice", a.len(), b.len()));
    }
    let mut inter = 0;
    let mut ca = 0;
    let mut cb = 0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        ca += usize::from(x);
        cb += usize::from(y);
    }
    Ok(dice_counts(inter, ca, cb))
}

/// Mean over instances of `la` of the best Dice against any instance of
/// `lb`. An empty `la` scores 0.
pub fn best_dice(la: &LabelMap, lb: &LabelMap) -> Result<f64> {
    let table = MatchTable::build(la, lb)?;
    Ok(best_dice_from(&table))
}

fn best_dice_from(table: &MatchTable) -> f64 {
    if table.ca == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..table.ca {
        let mut best = 0.0f64;
        for b in 0..table.cb {
            best = best.max(table.dice_at(a, b));
        }
        total += best;
    }
    total / table.ca as f64
}

/// min(BD(la, lb), BD(lb, la)). Two maps with no instances at all count as a
/// perfect (empty) agreement and score 1.
pub fn symmetric_best_dice(la: &LabelMap, lb: &LabelMap) -> Result<f64> {
    let table = MatchTable::build(la, lb)?;
    if table.ca == 0 && table.cb == 0 {
        return Ok(1.0);
    }
    let forward = best_dice_from(&table);
    let flipped = MatchTable {
        ca: table.cb,
        cb: table.ca,
        intersection: {
            let mut t = vec![0; table.ca * table.cb];
            for a in 0..table.ca {
                for b in 0..table.cb {
                    t[b * table.ca + a] = table.intersection[a * table.cb + b];
                }
            }
            t
        },
        area_a: table.area_b.clone(),
        area_b: table.area_a.clone(),
    };
    Ok(forward.min(best_dice_from(&flipped)))
}

/// Mean SBD over (prediction, ground truth) pairs.
pub fn msbd(pairs: &[(&LabelMap, &LabelMap)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("msbd needs a non-empty dataset".into()));
    }
    let mut total = 0.0;
    for (pred, gt) in pairs {
        total += symmetric_best_dice(pred, gt)?;
    }
    Ok(total / pairs.len() as f64)
}

/// The usual nine thresholds 0.5, 0.55, ..., 0.9.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..9).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Counting average precision at one threshold set, averaged over a dataset
/// pairwise: predictions greedily matched to ground truth by descending IoU
/// (ties by ascending gt id, then pred id); AP_t = TP/(TP+FP+FN).
pub fn map_iou(pairs: &[(&LabelMap, &LabelMap)], thresholds: &[f64]) -> Result<f64> {
    if pairs.is_empty() || thresholds.is_empty() {
        return Err(Error::InvalidConfig(
            "map_iou needs non-empty dataset and thresholds".into(),
        ));
    }
    for &t in thresholds {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "IoU threshold must be in (0,1), got {t}"
            )));
        }
    }
    let mut total = 0.0;
    for (pred, gt) in pairs {
        total += image_ap(pred, gt, thresholds)?;
    }
    Ok(total / pairs.len() as f64)
}

fn image_ap(pred: &LabelMap, gt: &LabelMap, thresholds: &[f64]) -> Result<f64> {
    let per = ap_per_threshold(pred, gt, thresholds)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Counting AP of one image at each threshold, in threshold order.
pub fn ap_per_threshold(pred: &LabelMap, gt: &LabelMap, thresholds: &[f64]) -> Result<Vec<f64>> {
    if thresholds.is_empty() {
        return Err(Error::InvalidConfig("ap_per_threshold needs thresholds".into()));
    }
    let table = MatchTable::build(gt, pred)?; // a = gt, b = pred
    let (n_gt, n_pred) = (table.ca, table.cb);
    if n_gt == 0 && n_pred == 0 {
        return Ok(vec![1.0; thresholds.len()]);
    }
    // Greedy one-to-one matching over all pairs by descending IoU. Pairs at
    // or above a threshold always precede pairs below it, so one matching
    // serves every threshold.
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for g in 0..n_gt {
        for p in 0..n_pred {
            let iou = table.iou_at(g, p);
            if iou > 0.0 {
                edges.push((iou, g, p));
            }
        }
    }
    edges.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .expect("IoU is finite")
            .then_with(|| (x.1, x.2).cmp(&(y.1, y.2)))
    });
    let mut gt_used = vec![false; n_gt];
    let mut pred_used = vec![false; n_pred];
    let mut matched_ious: Vec<f64> = Vec::new();
    for (iou, g, p) in edges {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            matched_ious.push(iou);
        }
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let tp = matched_ious.iter().filter(|&&iou| iou >= t).count();
            // TP + FP + FN = (#pred - TP) + (#gt - TP) + TP
            tp as f64 / (n_gt + n_pred - tp) as f64
        })
        .collect())
}
