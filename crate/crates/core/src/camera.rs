//! Pinhole projection, depth-based visibility and ground-truth splat rendering.

use nalgebra::{Matrix3, Matrix3x4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Point3, Scene, BACKGROUND};

/// Splat footprint used when rendering synthetic depth and oracle label images.
pub const DEFAULT_FOOTPRINT: u32 = 3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("scene has no ground-truth labels to render")]
    MissingGroundTruth,
}

/// 16-bit depth image; a stored value times `scale_mm_per_unit` is millimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    scale_mm_per_unit: f64,
    raw: Vec<u16>,
}

impl DepthImage {
    /// Wraps raw storage values. `raw` must hold `width * height` entries.
    pub fn from_raw(width: u32, height: u32, scale_mm_per_unit: f64, raw: Vec<u16>) -> Self {
        assert_eq!(raw.len(), width as usize * height as usize, "depth buffer size");
        Self { width, height, scale_mm_per_unit, raw }
    }

    pub fn empty(width: u32, height: u32, scale_mm_per_unit: f64) -> Self {
        Self::from_raw(width, height, scale_mm_per_unit, vec![0; width as usize * height as usize])
    }

    /// Quantizes a metric depth buffer; non-positive or non-finite entries become invalid.
    pub fn from_meters(width: u32, height: u32, scale_mm_per_unit: f64, meters: &[f32]) -> Self {
        let raw = meters
            .iter()
            .map(|&m| {
                if m.is_finite() && m > 0.0 {
                    let units = (m as f64 * 1000.0 / scale_mm_per_unit).round();
                    units.clamp(0.0, u16::MAX as f64) as u16
                } else {
                    0
                }
            })
            .collect();
        Self::from_raw(width, height, scale_mm_per_unit, raw)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn scale_mm_per_unit(&self) -> f64 {
        self.scale_mm_per_unit
    }

    pub fn raw(&self) -> &[u16] {
        &self.raw
    }

    /// Depth in meters at a pixel, `None` for holes.
    pub fn meters_at(&self, x: u32, y: u32) -> Option<f64> {
        let v = self.raw[(y * self.width + x) as usize];
        (v != 0).then(|| v as f64 * self.scale_mm_per_unit / 1000.0)
    }
}

/// Interleaved 8-bit RGB frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

/// A calibrated RGB-D frame: intrinsics `K`, world-to-camera extrinsics `P`, depth.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    id: u32,
    width: u32,
    height: u32,
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix3x4<f64>,
    projection: Matrix3x4<f64>,
    depth: DepthImage,
    rgb: Option<RgbImage>,
}

impl CameraView {
    pub fn new(id: u32, intrinsics: Matrix3<f64>, extrinsics: Matrix3x4<f64>, depth: DepthImage) -> Self {
        Self {
            id,
            width: depth.width(),
            height: depth.height(),
            intrinsics,
            extrinsics,
            projection: intrinsics * extrinsics,
            depth,
            rgb: None,
        }
    }

    pub fn with_rgb(mut self, rgb: RgbImage) -> Self {
        self.rgb = Some(rgb);
        self
    }

    pub fn with_depth(mut self, depth: DepthImage) -> Self {
        assert_eq!((depth.width(), depth.height()), (self.width, self.height));
        self.depth = depth;
        self
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix3x4<f64> {
        &self.extrinsics
    }

    pub fn depth(&self) -> &DepthImage {
        &self.depth
    }

    pub fn rgb(&self) -> Option<&RgbImage> {
        self.rgb.as_ref()
    }

    /// Checks the intrinsic-matrix shape and buffer dimensions.
    pub fn check(&self) -> Result<(), String> {
        let k = &self.intrinsics;
        if k[(2, 2)] != 1.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err("intrinsic matrix must be upper-triangular with K[2][2] = 1".into());
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        if self.extrinsics.iter().any(|v| !v.is_finite()) {
            return Err("extrinsic matrix has non-finite entries".into());
        }
        if let Some(rgb) = &self.rgb {
            if (rgb.width, rgb.height) != (self.width, self.height) || rgb.data.len() != self.pixel_count() * 3 {
                return Err("rgb frame dimensions differ from the view".into());
            }
        }
        Ok(())
    }
}

/// Result of projecting a world point into a view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel_x: f64,
    pub pixel_y: f64,
    /// Depth along the optical axis, meters.
    pub cam_depth: f64,
    pub in_frame: bool,
}

impl Projection {
    /// Integer pixel reached by round-to-nearest (ties to even), when in frame.
    pub fn pixel(&self) -> Option<(u32, u32)> {
        self.in_frame.then(|| (self.pixel_x.round_ties_even() as u32, self.pixel_y.round_ties_even() as u32))
    }
}

/// Depth agreement required between a projected point and the depth image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityTolerance {
    pub abs_m: f64,
    pub rel: f64,
}

impl Default for VisibilityTolerance {
    fn default() -> Self {
        Self { abs_m: 0.02, rel: 0.01 }
    }
}

impl VisibilityTolerance {
    pub fn bound(&self, cam_depth: f64) -> f64 {
        self.abs_m.max(self.rel * cam_depth)
    }
}

/// Projects `point` through `K · P`.
pub fn project_point(point: &Point3, view: &CameraView) -> Projection {
    let uvz = view.projection * Vector4::new(point.x, point.y, point.z, 1.0);
    let z = uvz.z;
    let pixel_x = uvz.x / z;
    let pixel_y = uvz.y / z;
    let (w, h) = (view.width as f64, view.height as f64);
    let in_frame = z > 0.0
        && pixel_x >= 0.0
        && pixel_y >= 0.0
        && pixel_x < w
        && pixel_y < h
        && pixel_x.round_ties_even() < w
        && pixel_y.round_ties_even() < h;
    Projection { pixel_x, pixel_y, cam_depth: z, in_frame }
}

/// Whether `point` is observed by `view`: in frame and in agreement with the
/// depth image at its pixel. Depth holes count as not observed.
pub fn visible(point: &Point3, view: &CameraView, tol: &VisibilityTolerance) -> bool {
    let proj = project_point(point, view);
    match proj.pixel() {
        Some((x, y)) => {
            view.depth.meters_at(x, y).is_some_and(|d| (d - proj.cam_depth).abs() <= tol.bound(proj.cam_depth))
        }
        None => false,
    }
}

/// Per-pixel splat of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatImage {
    pub width: u32,
    pub height: u32,
    /// Instance id per pixel, [`BACKGROUND`] where nothing was drawn.
    pub labels: Vec<i32>,
    /// Depth in meters per pixel, 0 where nothing was drawn.
    pub depth: Vec<f32>,
    /// Point whose own pixel this is (nearest such point), if any.
    pub owner: Vec<Option<u32>>,
}

impl SplatImage {
    pub fn label_at(&self, x: u32, y: u32) -> i32 {
        self.labels[(y * self.width + x) as usize]
    }

    /// Points that won the z-test at their own projected pixel.
    pub fn rendered_points(&self) -> Vec<u32> {
        let mut pts: Vec<u32> = self.owner.iter().flatten().copied().collect();
        pts.sort_unstable();
        pts
    }
}

/// Renders per-pixel instance ids and depth for the scene's ground truth.
pub fn render_gt(scene: &Scene, view: &CameraView, footprint: u32) -> Result<SplatImage, RenderError> {
    let labels = scene.gt_labels.as_deref().ok_or(RenderError::MissingGroundTruth)?;
    Ok(splat_points(&scene.points, Some(labels), view, footprint))
}

/// Z-buffered square-footprint splatting.
///
/// Each point first claims its own rounded pixel (nearest depth wins, ties
/// keep the lower index). The remaining footprint pixels only fill pixels that
/// no point projects to directly, again keeping the nearest depth. A point
/// that owns its pixel therefore always reads back its own depth.
pub fn splat_points(points: &[Point3], labels: Option<&[i32]>, view: &CameraView, footprint: u32) -> SplatImage {
    let (w, h) = (view.width as i64, view.height as i64);
    let n_px = view.pixel_count();
    let mut depth = vec![f32::INFINITY; n_px];
    let mut source: Vec<Option<u32>> = vec![None; n_px];
    let projected: Vec<Option<(i64, i64, f32)>> = points
        .iter()
        .map(|p| {
            let proj = project_point(p, view);
            proj.pixel().map(|(x, y)| (x as i64, y as i64, proj.cam_depth as f32))
        })
        .collect();

    for (i, proj) in projected.iter().enumerate() {
        if let Some((x, y, z)) = *proj {
            let idx = (y * w + x) as usize;
            if z < depth[idx] {
                depth[idx] = z;
                source[idx] = Some(i as u32);
            }
        }
    }
    let owner = source.clone();

    let lo = -((footprint.max(1) as i64 - 1) / 2);
    let hi = footprint.max(1) as i64 / 2;
    if hi > 0 || lo < 0 {
        let mut fill_depth = vec![f32::INFINITY; n_px];
        let mut fill_source: Vec<Option<u32>> = vec![None; n_px];
        for (i, proj) in projected.iter().enumerate() {
            let Some((cx, cy, z)) = *proj else { continue };
            for y in (cy + lo).max(0)..=(cy + hi).min(h - 1) {
                for x in (cx + lo).max(0)..=(cx + hi).min(w - 1) {
                    let idx = (y * w + x) as usize;
                    if owner[idx].is_none() && z < fill_depth[idx] {
                        fill_depth[idx] = z;
                        fill_source[idx] = Some(i as u32);
                    }
                }
            }
        }
        for idx in 0..n_px {
            if owner[idx].is_none() && fill_source[idx].is_some() {
                depth[idx] = fill_depth[idx];
                source[idx] = fill_source[idx];
            }
        }
    }

    let labels = source
        .iter()
        .map(|s| match (s, labels) {
            (Some(i), Some(l)) => l[*i as usize],
            _ => BACKGROUND,
        })
        .collect();
    for d in depth.iter_mut().filter(|d| d.is_infinite()) {
        *d = 0.0;
    }
    SplatImage { width: view.width, height: view.height, labels, depth, owner }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_view(depth_m: f32) -> CameraView {
        let k = Matrix3::new(100.0, 0.0, 64.0, 0.0, 100.0, 48.0, 0.0, 0.0, 1.0);
        let p = Matrix3x4::identity();
        let depth = DepthImage::from_meters(128, 96, 0.1, &vec![depth_m; 128 * 96]);
        CameraView::new(0, k, p, depth)
    }

    #[test]
    fn projects_off_axis_point() {
        let proj = project_point(&Point3::new(0.5, 0.0, 2.0), &test_view(2.0));
        assert_eq!((proj.pixel_x, proj.pixel_y, proj.cam_depth), (89.0, 48.0, 2.0));
        assert!(proj.in_frame);
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let proj = project_point(&Point3::new(0.0, 0.0, 2.0), &test_view(2.0));
        assert_eq!(proj.pixel(), Some((64, 48)));
    }

    #[test]
    fn behind_camera_is_out_of_frame() {
        let proj = project_point(&Point3::new(0.0, 0.0, -1.0), &test_view(2.0));
        assert!(!proj.in_frame);
        assert_eq!(proj.pixel(), None);
    }

    #[test]
    fn rounding_past_last_column_is_out_of_frame() {
        // u/z = 127.6 rounds to 128 == width
        let proj = project_point(&Point3::new(0.636, 0.0, 1.0), &test_view(1.0));
        assert!(!proj.in_frame);
    }

    #[test]
    fn ties_round_to_even() {
        let proj = project_point(&Point3::new(0.125, 0.0, 1.0), &test_view(1.0));
        assert_eq!(proj.pixel_x, 76.5);
        assert_eq!(proj.pixel(), Some((76, 48)));
    }

    #[test]
    fn visibility_cases() {
        let tol = VisibilityTolerance::default();
        let p = Point3::new(0.0, 0.0, 2.0);
        assert!(visible(&p, &test_view(2.0), &tol));
        assert!(!visible(&p, &test_view(1.5), &tol));
        assert!(!visible(&Point3::new(0.0, 0.0, -2.0), &test_view(2.0), &tol));
        // hole
        assert!(!visible(&p, &test_view(0.0), &tol));
    }

    #[test]
    fn relative_tolerance_dominates_far_away() {
        let tol = VisibilityTolerance::default();
        // at 4 m the bound is 4 cm
        let p = Point3::new(0.0, 0.0, 4.0);
        assert!(visible(&p, &test_view(4.03), &tol));
        assert!(!visible(&p, &test_view(4.05), &tol));
    }

    fn gt_scene(points: Vec<Point3>, labels: Vec<i32>) -> Scene {
        Scene { points, gt_labels: Some(labels), ..Scene::default() }
    }

    #[test]
    fn single_point_render() {
        let view = test_view(0.0);
        let scene = gt_scene(vec![Point3::new(0.0, 0.0, 2.0)], vec![4]);
        let img = render_gt(&scene, &view, 1).unwrap();
        let hits: Vec<usize> = (0..img.labels.len()).filter(|&i| img.labels[i] != BACKGROUND).collect();
        assert_eq!(hits, vec![48 * 128 + 64]);
        assert_eq!(img.depth[hits[0]], 2.0);
    }

    #[test]
    fn nearer_point_wins_pixel() {
        let view = test_view(0.0);
        let scene = gt_scene(vec![Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, 1.0)], vec![4, 9]);
        let img = render_gt(&scene, &view, 3).unwrap();
        assert_eq!(img.label_at(64, 48), 9);
        assert_eq!(img.depth[48 * 128 + 64], 1.0);
        assert_eq!(img.label_at(65, 49), 9);
        assert_eq!(img.rendered_points(), vec![1]);
    }

    #[test]
    fn empty_scene_renders_background() {
        let img = render_gt(&gt_scene(vec![], vec![]), &test_view(0.0), 3).unwrap();
        assert!(img.labels.iter().all(|&l| l == BACKGROUND));
        assert!(img.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn render_requires_gt() {
        let scene = Scene { points: vec![Point3::new(0.0, 0.0, 1.0)], ..Scene::default() };
        assert!(matches!(render_gt(&scene, &test_view(0.0), 1), Err(RenderError::MissingGroundTruth)));
    }

    #[test]
    fn rendered_points_are_visible() {
        let mut points = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                points.push(Point3::new(-0.5 + i as f64 * 0.05, -0.4 + j as f64 * 0.04, 1.5 + i as f64 * 0.07));
            }
        }
        let labels = vec![1; points.len()];
        let scene = gt_scene(points, labels);
        let view = test_view(0.0);
        let img = render_gt(&scene, &view, 3).unwrap();
        let view = view.with_depth(DepthImage::from_meters(128, 96, 0.1, &img.depth));
        let tol = VisibilityTolerance::default();
        for i in img.rendered_points() {
            assert!(visible(&scene.points[i as usize], &view, &tol), "point {i}");
        }
    }

    proptest! {
        #[test]
        fn projection_is_linear_in_normalized_coords(a in -0.6f64..0.6, b in -0.4f64..0.4, z in 0.1f64..50.0) {
            let view = test_view(1.0);
            let proj = project_point(&Point3::new(a * z, b * z, z), &view);
            // with fx = fy = 100 the normalized offset scales by the focal length
            prop_assert!((proj.pixel_x - (100.0 * a + 64.0)).abs() < 1e-9);
            prop_assert!((proj.pixel_y - (100.0 * b + 48.0)).abs() < 1e-9);
            prop_assert!((proj.cam_depth - z).abs() < 1e-12);
        }

        #[test]
        fn visible_implies_in_frame(x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0, d in 0.0f32..6.0) {
            let view = test_view(d);
            let p = Point3::new(x, y, z);
            if visible(&p, &view, &VisibilityTolerance::default()) {
                prop_assert!(project_point(&p, &view).in_frame);
            }
        }
    }
}
