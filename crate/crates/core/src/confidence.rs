//! Multi-view confidence ensemble and superpoint voting, plus the
//! smallest-box baseline labeling.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::camera::{project_point, visible, CameraView, VisibilityTolerance};
use crate::candidates::{CandidateMap, InstanceCandidates};
use crate::prompting::ScoreMask;
use crate::scene::{InstanceBox, LabelMap, Point3, SuperpointPartition, BACKGROUND};
use crate::view_select::ViewSelection;

/// Visibility-weighted mean of the merged scores at `point`'s pixel over the
/// given (view, mask) pairs. `None` when no view observes the point.
pub fn point_confidence(
    point: &Point3,
    views: &[&CameraView],
    masks: &[&ScoreMask],
    tol: &VisibilityTolerance,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (view, mask) in views.iter().zip(masks) {
        if !visible(point, view, tol) {
            continue;
        }
        let (x, y) = project_point(point, view).pixel().expect("visible points are in frame");
        sum += mask.at(x, y) as f64;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean of the observed values; `None` when nothing was observed.
pub fn superpoint_confidence(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceConfidence {
    pub instance_id: i32,
    /// Aligned with the instance's candidate points.
    pub point_conf: Vec<Option<f64>>,
    /// Aligned with the instance's candidate superpoints.
    pub sp_conf: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConfidenceTable {
    pub instances: Vec<InstanceConfidence>,
}

/// Confidences of one instance from its view selection and the merged mask
/// of each selected view (aligned with `selection.view_ids`). Visibility is
/// taken from the selection's cached visible sets.
pub fn instance_confidence(
    cands: &InstanceCandidates,
    selection: &ViewSelection,
    views: &[CameraView],
    masks: &[ScoreMask],
    partition: &SuperpointPartition,
    points: &[Point3],
) -> InstanceConfidence {
    assert_eq!(masks.len(), selection.view_slots.len());
    let mut sum = vec![0.0f64; cands.points.len()];
    let mut count = vec![0usize; cands.points.len()];
    for ((&slot, visible_pts), mask) in selection.view_slots.iter().zip(&selection.visible).zip(masks) {
        let view = &views[slot];
        for &p in visible_pts {
            let Ok(local) = cands.points.binary_search(&p) else { continue };
            let (x, y) = project_point(&points[p as usize], view).pixel().expect("visible points are in frame");
            sum[local] += mask.at(x, y) as f64;
            count[local] += 1;
        }
    }
    let point_conf: Vec<Option<f64>> = sum.iter().zip(&count).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect();

    let mut per_sp: BTreeMap<u32, Vec<Option<f64>>> = BTreeMap::new();
    for (&p, &c) in cands.points.iter().zip(&point_conf) {
        per_sp.entry(partition.assignment[p as usize]).or_default().push(c);
    }
    let sp_conf = cands
        .superpoints
        .iter()
        .map(|sp| per_sp.get(sp).and_then(|v| superpoint_confidence(v.iter().copied())))
        .collect();
    InstanceConfidence { instance_id: cands.instance_id, point_conf, sp_conf }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub labels: LabelMap,
    /// Mean confidence of the superpoints each instance won by vote.
    pub instance_scores: BTreeMap<i32, f64>,
    /// Superpoints labeled by the smallest-box fallback because no candidate
    /// instance ever observed them.
    pub fallback_superpoints: usize,
}

fn smallest_box(instance_ids: impl IntoIterator<Item = i32>, volumes: &BTreeMap<i32, f64>) -> Option<i32> {
    instance_ids
        .into_iter()
        .map(|id| (id, volumes.get(&id).copied().unwrap_or(f64::INFINITY)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

fn box_volumes(boxes: &[InstanceBox]) -> BTreeMap<i32, f64> {
    boxes.iter().map(|b| (b.instance_id, b.volume())).collect()
}

enum Vote {
    Winner(i32, f64),
    Fallback(i32),
    Background,
}

/// Superpoint voting: candidates with confidence `<= 0` or never observed
/// are dropped and the most confident survivor (ties: lowest id) takes the
/// whole superpoint. Superpoints never observed by any candidate instance go
/// to the candidate with the smallest box.
pub fn assign_labels(
    partition: &SuperpointPartition,
    candidates: &CandidateMap,
    table: &ConfidenceTable,
    boxes: &[InstanceBox],
) -> Assignment {
    assert_eq!(candidates.instances.len(), table.instances.len());
    let volumes = box_volumes(boxes);
    let by_sp = candidates.instances_by_superpoint(partition.superpoint_count);
    let votes: Vec<Vote> = by_sp
        .par_iter()
        .enumerate()
        .map(|(sp, slots)| {
            if slots.is_empty() {
                return Vote::Background;
            }
            let confs: Vec<(i32, Option<f64>)> = slots
                .iter()
                .map(|&slot| {
                    let cands = &candidates.instances[slot];
                    let pos = cands.superpoints.binary_search(&(sp as u32)).expect("candidate superpoint listed");
                    (cands.instance_id, table.instances[slot].sp_conf[pos])
                })
                .collect();
            if confs.iter().all(|(_, c)| c.is_none()) {
                return smallest_box(confs.iter().map(|(id, _)| *id), &volumes)
                    .map_or(Vote::Background, Vote::Fallback);
            }
            confs
                .iter()
                .filter_map(|&(id, c)| c.filter(|&v| v > 0.0).map(|v| (id, v)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map_or(Vote::Background, |(id, v)| Vote::Winner(id, v))
        })
        .collect();

    let sp_labels: Vec<i32> = votes
        .iter()
        .map(|v| match *v {
            Vote::Winner(id, _) | Vote::Fallback(id) => id,
            Vote::Background => BACKGROUND,
        })
        .collect();
    let mut won: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for v in &votes {
        if let Vote::Winner(id, c) = *v {
            let e = won.entry(id).or_default();
            e.0 += c;
            e.1 += 1;
        }
    }
    let mut instance_scores: BTreeMap<i32, f64> = won.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect();
    for &id in &sp_labels {
        if id != BACKGROUND {
            instance_scores.entry(id).or_insert(0.0);
        }
    }
    Assignment {
        labels: LabelMap(partition.assignment.iter().map(|&sp| sp_labels[sp as usize]).collect()),
        instance_scores,
        fallback_superpoints: votes.iter().filter(|v| matches!(v, Vote::Fallback(_))).count(),
    }
}

/// Every candidate point goes to the candidate instance with the smallest
/// box volume (ties: lowest id); all other points are background.
pub fn baseline_assign(point_count: usize, candidates: &CandidateMap, boxes: &[InstanceBox]) -> LabelMap {
    let volumes = box_volumes(boxes);
    let mut best: Vec<Option<(f64, i32)>> = vec![None; point_count];
    for cands in &candidates.instances {
        let key = (volumes.get(&cands.instance_id).copied().unwrap_or(f64::INFINITY), cands.instance_id);
        for &p in &cands.points {
            let slot = &mut best[p as usize];
            let better = match *slot {
                None => true,
                Some((v, id)) => key.0.total_cmp(&v).then(key.1.cmp(&id)).is_lt(),
            };
            if better {
                *slot = Some(key);
            }
        }
    }
    LabelMap(best.into_iter().map(|b| b.map_or(BACKGROUND, |(_, id)| id)).collect())
}

/// Ranking scores for baseline instances: smaller boxes rank first.
pub fn baseline_scores(boxes: &[InstanceBox]) -> BTreeMap<i32, f64> {
    boxes.iter().map(|b| (b.instance_id, -b.volume())).collect()
}
