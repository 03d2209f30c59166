//! Candidate points per instance: the points of every superpoint that lies
//! entirely inside the instance's box.

use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{InstanceBox, Point3, Scene, SuperpointPartition};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CandidateError {
    #[error("scene has no superpoint partition")]
    MissingSuperpoints,
}

/// Member lists and axis-aligned bounds of every superpoint.
#[derive(Clone, Debug)]
pub struct SuperpointIndex {
    pub members: Vec<Vec<u32>>,
    pub min: Vec<Point3>,
    pub max: Vec<Point3>,
}

impl SuperpointIndex {
    pub fn new(points: &[Point3], partition: &SuperpointPartition) -> Self {
        let count = partition.superpoint_count;
        let mut members = vec![Vec::new(); count];
        let mut min = vec![Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY); count];
        let mut max = vec![Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY); count];
        for (i, (&sp, p)) in partition.assignment.iter().zip(points).enumerate() {
            let sp = sp as usize;
            members[sp].push(i as u32);
            min[sp] = min[sp].component_min(*p);
            max[sp] = max[sp].component_max(*p);
        }
        Self { members, min, max }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Superpoints whose every point lies in the closed box, ascending.
    pub fn inside(&self, bx: &InstanceBox) -> Vec<u32> {
        (0..self.len())
            .filter(|&sp| !self.members[sp].is_empty() && bx.contains_box(&self.min[sp], &self.max[sp]))
            .map(|sp| sp as u32)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceCandidates {
    pub instance_id: i32,
    /// Contained superpoints, ascending.
    pub superpoints: Vec<u32>,
    /// Union of their points, ascending.
    pub points: Vec<u32>,
}

/// Candidate sets for every box, in box order. A point may be a candidate of
/// several instances where boxes overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateMap {
    pub instances: Vec<InstanceCandidates>,
}

impl CandidateMap {
    pub fn get(&self, instance_id: i32) -> Option<&InstanceCandidates> {
        self.instances.iter().find(|c| c.instance_id == instance_id)
    }

    /// For every superpoint, the positions (into `instances`) of the instances
    /// it is a candidate of.
    pub fn instances_by_superpoint(&self, superpoint_count: usize) -> Vec<Vec<usize>> {
        let mut by_sp = vec![Vec::new(); superpoint_count];
        for (slot, cands) in self.instances.iter().enumerate() {
            for &sp in &cands.superpoints {
                by_sp[sp as usize].push(slot);
            }
        }
        by_sp
    }
}

/// Ids of superpoints entirely inside `bx` (closed containment).
pub fn superpoints_in_box(bx: &InstanceBox, scene: &Scene) -> Result<Vec<u32>, CandidateError> {
    let partition = scene.superpoints.as_ref().ok_or(CandidateError::MissingSuperpoints)?;
    Ok(SuperpointIndex::new(&scene.points, partition).inside(bx))
}

pub fn build_candidate_map(scene: &Scene, boxes: &[InstanceBox]) -> Result<CandidateMap, CandidateError> {
    let partition = scene.superpoints.as_ref().ok_or(CandidateError::MissingSuperpoints)?;
    let index = SuperpointIndex::new(&scene.points, partition);
    Ok(build_candidate_map_indexed(&index, boxes))
}

pub fn build_candidate_map_indexed(index: &SuperpointIndex, boxes: &[InstanceBox]) -> CandidateMap {
    let instances = boxes
        .par_iter()
        .map(|bx| {
            let superpoints = index.inside(bx);
            let mut points: Vec<u32> =
                superpoints.iter().flat_map(|&sp| index.members[sp as usize].iter().copied()).collect();
            points.sort_unstable();
            InstanceCandidates { instance_id: bx.instance_id, superpoints, points }
        })
        .collect();
    CandidateMap { instances }
}
