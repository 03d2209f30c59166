//! Core scene types shared by every pipeline stage.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;

/// Instance id used for points that belong to no annotated instance.
pub const BACKGROUND: i32 = -1;

/// Allowed deviation of a stored normal from unit length.
const NORMAL_LENGTH_TOL: f64 = 1e-3;

/// A location in world coordinates, in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn axis(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {axis} out of range"),
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// Rounds every coordinate through `f32`, the bundle storage precision.
    pub fn quantized(self) -> Self {
        Self::new(self.x as f32 as f64, self.y as f32 as f64, self.z as f32 as f64)
    }

    pub fn component_min(self, other: Self) -> Self {
        Self::new(self.x.min(other.x), self.y.min(other.y), self.z.min(other.z))
    }

    pub fn component_max(self, other: Self) -> Self {
        Self::new(self.x.max(other.x), self.y.max(other.y), self.z.max(other.z))
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        p.to_array()
    }
}

/// Axis-aligned 3D bounding box annotation of one instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceBox {
    pub instance_id: i32,
    pub semantic_class: i32,
    pub c_min: Point3,
    pub c_max: Point3,
}

impl InstanceBox {
    /// Closed containment test: boundary points count as inside.
    pub fn contains(&self, p: &Point3) -> bool {
        self.c_min.x <= p.x
            && p.x <= self.c_max.x
            && self.c_min.y <= p.y
            && p.y <= self.c_max.y
            && self.c_min.z <= p.z
            && p.z <= self.c_max.z
    }

    /// True when `inner` lies entirely within this box.
    pub fn contains_box(&self, inner_min: &Point3, inner_max: &Point3) -> bool {
        self.contains(inner_min) && self.contains(inner_max)
    }

    pub fn extent(&self) -> Point3 {
        Point3::new(self.c_max.x - self.c_min.x, self.c_max.y - self.c_min.y, self.c_max.z - self.c_min.z)
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x.max(0.0) * e.y.max(0.0) * e.z.max(0.0)
    }

    pub fn is_ordered(&self) -> bool {
        self.c_min.x <= self.c_max.x && self.c_min.y <= self.c_max.y && self.c_min.z <= self.c_max.z
    }
}

/// Assignment of every point to one superpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointPartition {
    pub assignment: Vec<u32>,
    pub superpoint_count: usize,
}

impl SuperpointPartition {
    /// Builds a partition from raw ids, relabeling them densely in order of
    /// first appearance.
    pub fn from_raw_ids(raw: &[usize]) -> Self {
        let mut remap = std::collections::HashMap::new();
        let assignment = raw
            .iter()
            .map(|&id| {
                let next = remap.len() as u32;
                *remap.entry(id).or_insert(next)
            })
            .collect();
        Self { assignment, superpoint_count: remap.len() }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Point indices of every superpoint, each list in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.superpoint_count];
        for (point, &sp) in self.assignment.iter().enumerate() {
            if let Some(list) = members.get_mut(sp as usize) {
                list.push(point);
            }
        }
        members
    }

    /// Describes the first violated invariant, if any.
    pub fn check(&self) -> Option<String> {
        let mut seen = vec![false; self.superpoint_count];
        for (point, &sp) in self.assignment.iter().enumerate() {
            match seen.get_mut(sp as usize) {
                Some(flag) => *flag = true,
                None => {
                    return Some(format!("point {point} has superpoint id {sp} outside [0, {})", self.superpoint_count))
                }
            }
        }
        seen.iter().position(|s| !s).map(|sp| format!("superpoint id {sp} has no member points"))
    }
}

/// Final per-point instance assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap(pub Vec<i32>);

impl LabelMap {
    pub fn background(len: usize) -> Self {
        Self(vec![BACKGROUND; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.0
    }

    /// Distinct non-background instance ids, ascending.
    pub fn instance_ids(&self) -> BTreeSet<i32> {
        self.0.iter().copied().filter(|&l| l != BACKGROUND).collect()
    }
}

/// A reconstructed point cloud with its camera views and box annotations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3>,
    pub normals: Option<Vec<Point3>>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub gt_labels: Option<Vec<i32>>,
    pub views: Vec<CameraView>,
    pub boxes: Vec<InstanceBox>,
    pub superpoints: Option<SuperpointPartition>,
}

impl Scene {
    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    /// Ground-truth instance ids (excluding background), ascending.
    pub fn gt_instance_ids(&self) -> BTreeSet<i32> {
        self.gt_labels.iter().flatten().copied().filter(|&l| l != BACKGROUND).collect()
    }

    pub fn view_by_id(&self, id: u32) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id() == id)
    }
}

/// One broken invariant found by [`validate_scene`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LengthMismatch { array: &'static str, expected: usize, found: usize },
    NonFinitePoint { index: usize },
    NonUnitNormal { index: usize, norm: f64 },
    ColorOutOfRange { index: usize },
    UnorderedBox { instance_id: i32, axis: usize },
    BoxInstanceMissing { instance_id: i32 },
    DuplicateBox { instance_id: i32 },
    InvalidPartition { detail: String },
    InvalidView { view_id: u32, detail: String },
    DuplicateView { view_id: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LengthMismatch { array, expected, found } => {
                write!(f, "{array} has {found} entries, expected {expected}")
            }
            Self::NonFinitePoint { index } => write!(f, "point {index} has a non-finite coordinate"),
            Self::NonUnitNormal { index, norm } => {
                write!(f, "normal of point {index} has length {norm}")
            }
            Self::ColorOutOfRange { index } => write!(f, "color of point {index} is outside [0, 1]"),
            Self::UnorderedBox { instance_id, axis } => {
                write!(f, "box of instance {instance_id} has c_min > c_max on axis {axis}")
            }
            Self::BoxInstanceMissing { instance_id } => {
                write!(f, "box references instance {instance_id} absent from gt labels")
            }
            Self::DuplicateBox { instance_id } => {
                write!(f, "instance {instance_id} has more than one box")
            }
            Self::InvalidPartition { detail } => write!(f, "superpoints: {detail}"),
            Self::InvalidView { view_id, detail } => write!(f, "view {view_id}: {detail}"),
            Self::DuplicateView { view_id } => write!(f, "view id {view_id} appears twice"),
        }
    }
}

/// Checks every scene invariant and reports all violations found.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let n = scene.points.len();
    let mut report = Vec::new();
    let check_len = |array: &'static str, found: Option<usize>, report: &mut Vec<Violation>| {
        if let Some(found) = found.filter(|&f| f != n) {
            report.push(Violation::LengthMismatch { array, expected: n, found });
        }
    };
    check_len("normals", scene.normals.as_ref().map(Vec::len), &mut report);
    check_len("colors", scene.colors.as_ref().map(Vec::len), &mut report);
    check_len("gt_labels", scene.gt_labels.as_ref().map(Vec::len), &mut report);
    check_len("superpoints", scene.superpoints.as_ref().map(|s| s.len()), &mut report);

    report.extend(
        scene
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_finite())
            .map(|(index, _)| Violation::NonFinitePoint { index }),
    );
    if let Some(normals) = &scene.normals {
        for (index, nrm) in normals.iter().enumerate() {
            let norm = nrm.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > NORMAL_LENGTH_TOL {
                report.push(Violation::NonUnitNormal { index, norm });
            }
        }
    }
    if let Some(colors) = &scene.colors {
        for (index, c) in colors.iter().enumerate() {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                report.push(Violation::ColorOutOfRange { index });
            }
        }
    }

    let gt_ids = scene.gt_labels.as_ref().map(|_| scene.gt_instance_ids());
    let mut box_ids = BTreeSet::new();
    for b in &scene.boxes {
        for axis in 0..3 {
            if !(b.c_min.axis(axis) <= b.c_max.axis(axis)) {
                report.push(Violation::UnorderedBox { instance_id: b.instance_id, axis });
            }
        }
        if let Some(ids) = &gt_ids {
            if !ids.contains(&b.instance_id) {
                report.push(Violation::BoxInstanceMissing { instance_id: b.instance_id });
            }
        }
        if !box_ids.insert(b.instance_id) {
            report.push(Violation::DuplicateBox { instance_id: b.instance_id });
        }
    }

    if let Some(detail) = scene.superpoints.as_ref().and_then(SuperpointPartition::check) {
        report.push(Violation::InvalidPartition { detail });
    }

    let mut view_ids = BTreeSet::new();
    for view in &scene.views {
        if let Err(detail) = view.check() {
            report.push(Violation::InvalidView { view_id: view.id(), detail });
        }
        if !view_ids.insert(view.id()) {
            report.push(Violation::DuplicateView { view_id: view.id() });
        }
    }
    report
}
