//! Greedy per-instance view selection: repeatedly take the view that observes
//! the most not-yet-observed candidate points.

use rayon::prelude::*;
use serde::Serialize;

use crate::camera::{visible, CameraView, VisibilityTolerance};
use crate::candidates::CandidateMap;
use crate::scene::{Point3, Scene};

/// Outcome of greedy set cover over a fixed universe `0..universe`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreedyCover {
    /// Positions of the chosen sets, in selection order.
    pub order: Vec<usize>,
    /// Newly covered element count of each chosen set.
    pub gains: Vec<usize>,
    /// Elements left uncovered, ascending.
    pub uncovered: Vec<u32>,
}

/// Greedy cover of `0..universe` by `sets`. Each round picks the set covering
/// the most uncovered elements; ties go to the smallest `keys` entry. Stops
/// when no set adds anything or `max_sets` is reached.
pub fn greedy_cover(universe: usize, sets: &[Vec<u32>], keys: &[u32], max_sets: Option<usize>) -> GreedyCover {
    assert_eq!(sets.len(), keys.len());
    let mut covered = vec![false; universe];
    let mut used = vec![false; sets.len()];
    let mut order = Vec::new();
    let mut gains = Vec::new();
    while max_sets.is_none_or(|m| order.len() < m) {
        let best = sets
            .iter()
            .enumerate()
            .filter(|(s, _)| !used[*s])
            .map(|(s, members)| (s, members.iter().filter(|&&e| !covered[e as usize]).count()))
            .filter(|&(_, gain)| gain > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(keys[b.0].cmp(&keys[a.0])));
        let Some((s, gain)) = best else { break };
        used[s] = true;
        for &e in &sets[s] {
            covered[e as usize] = true;
        }
        order.push(s);
        gains.push(gain);
    }
    let uncovered = (0..universe as u32).filter(|&e| !covered[e as usize]).collect();
    GreedyCover { order, gains, uncovered }
}

/// Candidates observed by `view`, in input order.
pub fn visible_candidates(
    candidates: &[u32],
    points: &[Point3],
    view: &CameraView,
    tol: &VisibilityTolerance,
) -> Vec<u32> {
    candidates.iter().copied().filter(|&p| visible(&points[p as usize], view, tol)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ViewSelection {
    /// Selected view ids in selection order.
    pub view_ids: Vec<u32>,
    /// Positions of the selected views in the input slice.
    #[serde(skip)]
    pub view_slots: Vec<usize>,
    /// Newly observed candidate count per selected view.
    pub gains: Vec<usize>,
    /// All observed candidates (point indices) of each selected view.
    #[serde(skip)]
    pub visible: Vec<Vec<u32>>,
    /// Candidates observed by no view at all (or beyond the view cap).
    pub uncovered: Vec<u32>,
}

pub fn greedy_select_views(
    candidates: &[u32],
    points: &[Point3],
    views: &[CameraView],
    tol: &VisibilityTolerance,
    max_views: Option<usize>,
) -> ViewSelection {
    let per_view: Vec<Vec<u32>> = views
        .par_iter()
        .map(|v| {
            (0..candidates.len() as u32)
                .filter(|&local| visible(&points[candidates[local as usize] as usize], v, tol))
                .collect()
        })
        .collect();
    let keys: Vec<u32> = views.iter().map(CameraView::id).collect();
    let cover = greedy_cover(candidates.len(), &per_view, &keys, max_views);
    let to_points = |locals: &[u32]| locals.iter().map(|&l| candidates[l as usize]).collect::<Vec<u32>>();
    ViewSelection {
        view_ids: cover.order.iter().map(|&s| keys[s]).collect(),
        view_slots: cover.order.clone(),
        gains: cover.gains,
        visible: cover.order.iter().map(|&s| to_points(&per_view[s])).collect(),
        uncovered: to_points(&cover.uncovered),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InstanceCover {
    pub instance_id: i32,
    #[serde(flatten)]
    pub selection: ViewSelection,
}

/// Independent view selections for every instance of a candidate map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ViewCover {
    pub instances: Vec<InstanceCover>,
}

impl ViewCover {
    pub fn get(&self, instance_id: i32) -> Option<&InstanceCover> {
        self.instances.iter().find(|c| c.instance_id == instance_id)
    }

    pub fn uncovered_count(&self) -> usize {
        self.instances.iter().map(|c| c.selection.uncovered.len()).sum()
    }
}

pub fn build_view_cover(
    candidates: &CandidateMap,
    scene: &Scene,
    tol: &VisibilityTolerance,
    max_views: Option<usize>,
) -> ViewCover {
    let instances = candidates
        .instances
        .par_iter()
        .map(|c| InstanceCover {
            instance_id: c.instance_id,
            selection: greedy_select_views(&c.points, &scene.points, &scene.views, tol, max_views),
        })
        .collect();
    ViewCover { instances }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::DepthImage;
    use nalgebra::{Matrix3, Matrix3x4};

    #[test]
    fn hand_simulated_greedy() {
        // v1 = {p1, p2}, v2 = {p3}, v3 = {p2, p3}
        let sets = vec![vec![0, 1], vec![2], vec![1, 2]];
        let cover = greedy_cover(3, &sets, &[1, 2, 3], None);
        assert_eq!(cover.order, vec![0, 1]);
        assert_eq!(cover.gains, vec![2, 1]);
        assert!(cover.uncovered.is_empty());
    }

    #[test]
    fn single_full_view_selected_alone() {
        let sets = vec![vec![0], vec![0, 1, 2, 3], vec![2, 3]];
        let cover = greedy_cover(4, &sets, &[0, 1, 2], None);
        assert_eq!(cover.order, vec![1]);
    }

    #[test]
    fn invisible_point_reported_uncovered() {
        let sets = vec![vec![0, 1], vec![1]];
        let cover = greedy_cover(3, &sets, &[0, 1], None);
        assert_eq!(cover.order, vec![0]);
        assert_eq!(cover.uncovered, vec![2]);
    }

    #[test]
    fn ties_prefer_lowest_key_not_slot() {
        let sets = vec![vec![0], vec![1]];
        let cover = greedy_cover(2, &sets, &[9, 4], None);
        assert_eq!(cover.order, vec![1, 0]);
    }

    #[test]
    fn cap_limits_selection() {
        let sets = vec![vec![0], vec![1], vec![2]];
        let cover = greedy_cover(3, &sets, &[0, 1, 2], Some(2));
        assert_eq!(cover.order.len(), 2);
        assert_eq!(cover.uncovered, vec![2]);
    }

    fn frontal_view(id: u32, depth_m: f32) -> CameraView {
        let k = Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        let depth = DepthImage::from_meters(64, 64, 0.1, &vec![depth_m; 64 * 64]);
        CameraView::new(id, k, Matrix3x4::identity(), depth)
    }

    #[test]
    fn visible_candidate_filtering() {
        let tol = VisibilityTolerance::default();
        let points = vec![Point3::new(0.0, 0.0, 2.0), Point3::new(0.1, 0.0, 2.0), Point3::new(0.0, 0.1, -2.0)];
        let view = frontal_view(0, 2.0);
        assert_eq!(visible_candidates(&[0, 1], &points, &view, &tol), vec![0, 1]);
        assert!(visible_candidates(&[2], &points, &view, &tol).is_empty());
        // occluder at 1.5 m in front of every pixel
        assert!(visible_candidates(&[0, 1], &points, &frontal_view(0, 1.5), &tol).is_empty());
    }

    #[test]
    fn empty_candidates_select_nothing() {
        let sel = greedy_select_views(&[], &[], &[frontal_view(0, 2.0)], &VisibilityTolerance::default(), None);
        assert!(sel.view_ids.is_empty());
        assert!(sel.uncovered.is_empty());
    }
}
