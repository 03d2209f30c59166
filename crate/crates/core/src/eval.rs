//! Label quality metrics: wrong point and superpoint counts, per-instance
//! IoU, and average precision over IoU thresholds.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::scene::{SuperpointPartition, BACKGROUND};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("prediction has {pred} labels, ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("superpoint partition covers {found} points, expected {expected}")]
    PartitionMismatch { expected: usize, found: usize },
    #[error("instance {0} absent from ground truth")]
    UnknownInstance(i32),
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn check_len(pred: &[i32], gt: &[i32]) -> Result<(), EvalError> {
    if pred.len() == gt.len() {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { pred: pred.len(), gt: gt.len() })
    }
}

pub fn wrong_points(pred: &[i32], gt: &[i32]) -> Result<usize, EvalError> {
    check_len(pred, gt)?;
    Ok(pred.iter().zip(gt).filter(|(a, b)| a != b).count())
}

fn majority(labels: impl Iterator<Item = i32>) -> i32 {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(i32, usize)>, (l, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((l, n)),
        })
        .map_or(BACKGROUND, |(l, _)| l)
}

/// Superpoints whose majority predicted label differs from their majority
/// ground-truth label (majority ties: lowest label).
pub fn wrong_superpoints(pred: &[i32], gt: &[i32], partition: &SuperpointPartition) -> Result<usize, EvalError> {
    check_len(pred, gt)?;
    if partition.len() != gt.len() {
        return Err(EvalError::PartitionMismatch { expected: gt.len(), found: partition.len() });
    }
    Ok(partition
        .members()
        .iter()
        .filter(|m| !m.is_empty())
        .filter(|m| majority(m.iter().map(|&i| pred[i])) != majority(m.iter().map(|&i| gt[i])))
        .count())
}

fn iou_counts(pred: &[i32], gt: &[i32], pred_id: i32, gt_id: i32) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == pred_id, g == gt_id);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn instance_iou(pred: &[i32], gt: &[i32], instance: i32) -> Result<f64, EvalError> {
    check_len(pred, gt)?;
    if instance == BACKGROUND || !gt.contains(&instance) {
        return Err(EvalError::UnknownInstance(instance));
    }
    Ok(iou_counts(pred, gt, instance, instance))
}

/// Pairwise intersections and sizes of predicted and ground-truth instances.
struct Overlaps {
    pred_sizes: HashMap<i32, usize>,
    gt_sizes: BTreeMap<i32, usize>,
    inter: HashMap<(i32, i32), usize>,
}

impl Overlaps {
    fn new(pred: &[i32], gt: &[i32]) -> Self {
        let mut o = Self { pred_sizes: HashMap::new(), gt_sizes: BTreeMap::new(), inter: HashMap::new() };
        for (&p, &g) in pred.iter().zip(gt) {
            if p != BACKGROUND {
                *o.pred_sizes.entry(p).or_default() += 1;
            }
            if g != BACKGROUND {
                *o.gt_sizes.entry(g).or_default() += 1;
            }
            if p != BACKGROUND && g != BACKGROUND {
                *o.inter.entry((p, g)).or_default() += 1;
            }
        }
        o
    }

    fn iou(&self, p: i32, g: i32) -> f64 {
        let i = self.inter.get(&(p, g)).copied().unwrap_or(0);
        let u = self.pred_sizes.get(&p).copied().unwrap_or(0) + self.gt_sizes[&g] - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }
}

/// Predicted instances in rank order: higher score first, ties by lower id.
/// Instances without a score rank last.
pub fn rank_predictions(pred: &[i32], scores: &BTreeMap<i32, f64>) -> Vec<i32> {
    let ids: BTreeSet<i32> = pred.iter().copied().filter(|&l| l != BACKGROUND).collect();
    let mut ranked: Vec<i32> = ids.into_iter().collect();
    ranked.sort_by(|a, b| {
        let sa = scores.get(a).copied().unwrap_or(f64::NEG_INFINITY);
        let sb = scores.get(b).copied().unwrap_or(f64::NEG_INFINITY);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    ranked
}

fn ap_from_overlaps(o: &Overlaps, ranked: &[i32], threshold: f64) -> f64 {
    let n_gt = o.gt_sizes.len();
    if n_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let mut matched: BTreeSet<i32> = BTreeSet::new();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (rank, &p) in ranked.iter().enumerate() {
        let best = o
            .gt_sizes
            .keys()
            .filter(|g| !matched.contains(g))
            .map(|&g| (g, o.iou(p, g)))
            .filter(|&(_, iou)| iou >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            matched.insert(g);
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // all-point interpolation: precision envelope integrated over recall
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (recall, _) = curve[i];
        if recall > prev_recall {
            let envelope = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// Average precision at one IoU threshold with greedy matching in rank order.
pub fn ap_at(pred: &[i32], gt: &[i32], scores: &BTreeMap<i32, f64>, threshold: f64) -> Result<f64, EvalError> {
    check_len(pred, gt)?;
    Ok(ap_from_overlaps(&Overlaps::new(pred, gt), &rank_predictions(pred, scores), threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub points: usize,
    pub wrong_points: usize,
    pub superpoints: usize,
    pub wrong_superpoints: usize,
    pub per_instance_iou: BTreeMap<i32, f64>,
    pub mean_iou: f64,
    pub ap25: f64,
    pub ap50: f64,
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub map: f64,
}

pub fn evaluate(
    pred: &[i32],
    gt: &[i32],
    partition: &SuperpointPartition,
    scores: &BTreeMap<i32, f64>,
) -> Result<EvalReport, EvalError> {
    let wrong_points = wrong_points(pred, gt)?;
    let wrong_superpoints = wrong_superpoints(pred, gt, partition)?;
    let overlaps = Overlaps::new(pred, gt);
    let per_instance_iou: BTreeMap<i32, f64> =
        overlaps.gt_sizes.keys().map(|&g| (g, iou_counts(pred, gt, g, g))).collect();
    let mean_iou = if per_instance_iou.is_empty() {
        0.0
    } else {
        per_instance_iou.values().sum::<f64>() / per_instance_iou.len() as f64
    };
    let ranked = rank_predictions(pred, scores);
    let ap = |t: f64| ap_from_overlaps(&overlaps, &ranked, t);
    let thresholds = map_thresholds();
    Ok(EvalReport {
        points: gt.len(),
        wrong_points,
        superpoints: partition.superpoint_count,
        wrong_superpoints,
        per_instance_iou,
        mean_iou,
        ap25: ap(0.25),
        ap50: ap(0.5),
        map: thresholds.iter().map(|&t| ap(t)).sum::<f64>() / thresholds.len() as f64,
    })
}
