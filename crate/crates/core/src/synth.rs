//! Procedural indoor scenes with ground truth: an open-top room with a tiled
//! floor, tables, boxes and cylinders sampled on their surfaces, and an
//! inward-looking camera orbit with rendered depth.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{save_scene_bundle, BundleError};
use crate::camera::{splat_points, CameraView, DepthImage, RgbImage, DEFAULT_FOOTPRINT};
use crate::scene::{InstanceBox, Point3, Scene, BACKGROUND};

pub const CLASS_FLOOR: i32 = 0;
pub const CLASS_WALL: i32 = 1;
pub const CLASS_BOX: i32 = 3;
pub const CLASS_CYLINDER: i32 = 4;
pub const CLASS_TABLE: i32 = 5;

/// Floor tiles are tilted in four directions so neighbouring tiles never
/// share a normal and each tile becomes its own superpoint.
const TILE: f64 = 0.25;
const TILE_TILT_DEG: f64 = 6.0;
const OBJECT_GAP: f64 = 0.2;
const WALL_MARGIN: f64 = 0.3;
const MIN_FACE_SIDE: usize = 5;
const DEPTH_SCALE_MM: f64 = 0.2;
const PLACEMENT_ATTEMPTS: usize = 500;
const LAYOUT_RESTARTS: usize = 20;
/// Floor is left unsampled this close to solid footprints, so no floor
/// sample ends up with only object points as neighbours.
const FLOOR_CLEARANCE: f64 = 0.04;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place object {object} after {attempts} attempts")]
    Placement { object: usize, attempts: usize },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Room width (x), depth (y) and wall height (z), meters.
    pub room: [f64; 3],
    pub object_count: usize,
    pub points_per_m2: f64,
    pub view_count: usize,
    /// Cluster objects near the room center so they hide each other.
    pub occlusion: bool,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_px: f64,
    /// Render an RGB frame per view.
    pub rgb: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            room: [3.8, 3.8, 2.2],
            object_count: 5,
            points_per_m2: 500.0,
            view_count: 12,
            occlusion: true,
            image_width: 256,
            image_height: 192,
            focal_px: 200.0,
            rgb: true,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.room.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
            return bad("room dimensions must be positive");
        }
        if self.room[0].min(self.room[1]) < 2.0 {
            return bad("room must be at least 2 m wide and deep");
        }
        if self.object_count == 0 {
            return bad("object_count must be at least 1");
        }
        if self.view_count == 0 {
            return bad("view_count must be at least 1");
        }
        if !(self.points_per_m2.is_finite() && self.points_per_m2 > 0.0) {
            return bad("points_per_m2 must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 || !(self.focal_px > 0.0) {
            return bad("image size and focal length must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Cuboid { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Table { size: [f64; 3], top: f64, leg: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Object {
    /// Footprint center on the floor.
    center: [f64; 2],
    shape: Shape,
}

impl Object {
    fn half_extent(&self) -> [f64; 2] {
        match self.shape {
            Shape::Cuboid { size } | Shape::Table { size, .. } => [size[0] / 2.0, size[1] / 2.0],
            Shape::Cylinder { radius, .. } => [radius, radius],
        }
    }

    fn class(&self) -> i32 {
        match self.shape {
            Shape::Cuboid { .. } => CLASS_BOX,
            Shape::Cylinder { .. } => CLASS_CYLINDER,
            Shape::Table { .. } => CLASS_TABLE,
        }
    }

    /// Whether the floor at (x, y) lies within `margin` of a solid part.
    fn covers_floor(&self, x: f64, y: f64, margin: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        match self.shape {
            Shape::Cuboid { size } => dx.abs() <= size[0] / 2.0 + margin && dy.abs() <= size[1] / 2.0 + margin,
            Shape::Cylinder { radius, .. } => dx.hypot(dy) <= radius + margin,
            Shape::Table { .. } => self
                .legs()
                .iter()
                .any(|l| (x - l[0]).abs() <= l[2] / 2.0 + margin && (y - l[1]).abs() <= l[2] / 2.0 + margin),
        }
    }

    /// Leg centers and side length of a table.
    fn legs(&self) -> Vec<[f64; 3]> {
        let Shape::Table { size, leg, .. } = self.shape else { return Vec::new() };
        let inset = 0.03 + leg / 2.0;
        let (hx, hy) = (size[0] / 2.0 - inset, size[1] / 2.0 - inset);
        [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
            .iter()
            .map(|&(sx, sy)| [self.center[0] + sx * hx, self.center[1] + sy * hy, leg])
            .collect()
    }

    fn separated_from(&self, other: &Object, gap: f64) -> bool {
        let (a, b) = (self.half_extent(), other.half_extent());
        (self.center[0] - other.center[0]).abs() >= a[0] + b[0] + gap
            || (self.center[1] - other.center[1]).abs() >= a[1] + b[1] + gap
    }
}

/// Accumulates surface samples with labels and analytic normals.
struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
    density: f64,
    points: Vec<Point3>,
    normals: Vec<Point3>,
    labels: Vec<i32>,
    classes: Vec<i32>,
}

impl Sampler<'_> {
    /// Sample spacing for a face: the density spacing, tightened so the
    /// shorter side still gets `MIN_FACE_SIDE` samples. Spacing is the same
    /// along both sides so thin faces stay connected in the kNN graph.
    fn spacing(&self, la: f64, lb: f64) -> f64 {
        (1.0 / self.density.sqrt()).min(la.min(lb) / MIN_FACE_SIDE as f64)
    }

    fn grid_count(length: f64, spacing: f64) -> usize {
        ((length / spacing).round() as usize).max(1)
    }

    fn push(&mut self, p: Vector3<f64>, n: Vector3<f64>, label: i32, class: i32) {
        self.points.push(Point3::from_vector(&p).quantized());
        self.normals.push(Point3::from_vector(&n.normalize()));
        self.labels.push(label);
        self.classes.push(class);
    }

    /// Jittered grid over the parallelogram `origin + s*a + t*b`, keeping
    /// samples accepted by `keep`.
    #[allow(clippy::too_many_arguments)]
    fn rect(
        &mut self,
        origin: Vector3<f64>,
        a: Vector3<f64>,
        b: Vector3<f64>,
        normal: Vector3<f64>,
        label: i32,
        class: i32,
        keep: &dyn Fn(&Vector3<f64>) -> bool,
    ) {
        let spacing = self.spacing(a.norm(), b.norm());
        let (nu, nv) = (Self::grid_count(a.norm(), spacing), Self::grid_count(b.norm(), spacing));
        for i in 0..nu {
            for j in 0..nv {
                let s = (i as f64 + 0.1 + 0.8 * self.rng.random::<f64>()) / nu as f64;
                let t = (j as f64 + 0.1 + 0.8 * self.rng.random::<f64>()) / nv as f64;
                let p = origin + a * s + b * t;
                if keep(&p) {
                    self.push(p, normal, label, class);
                }
            }
        }
    }

    /// Top and four sides; bottoms rest on the floor or face it unseen.
    fn cuboid(&mut self, lo: Vector3<f64>, hi: Vector3<f64>, label: i32, class: i32) {
        let d = hi - lo;
        let (ex, ey, ez) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
        let all = |_: &Vector3<f64>| true;
        self.rect(Vector3::new(lo.x, lo.y, hi.z), ex, ey, Vector3::z(), label, class, &all);
        self.rect(lo, ex, ez, -Vector3::y(), label, class, &all);
        self.rect(Vector3::new(lo.x, hi.y, lo.z), ex, ez, Vector3::y(), label, class, &all);
        self.rect(lo, ey, ez, -Vector3::x(), label, class, &all);
        self.rect(Vector3::new(hi.x, lo.y, lo.z), ey, ez, Vector3::x(), label, class, &all);
    }

    fn cylinder(&mut self, center: [f64; 2], radius: f64, height: f64, label: i32, class: i32) {
        let spacing = self.spacing(TAU * radius, height);
        let (nu, nv) = (Self::grid_count(TAU * radius, spacing), Self::grid_count(height, spacing));
        for i in 0..nu {
            for j in 0..nv {
                let angle = TAU * (i as f64 + 0.1 + 0.8 * self.rng.random::<f64>()) / nu as f64;
                let z = height * (j as f64 + 0.1 + 0.8 * self.rng.random::<f64>()) / nv as f64;
                let n = Vector3::new(angle.cos(), angle.sin(), 0.0);
                let p = Vector3::new(center[0], center[1], z) + n * radius;
                self.push(p, n, label, class);
            }
        }
        let lo = Vector3::new(center[0] - radius, center[1] - radius, height);
        let inside = |p: &Vector3<f64>| (p.x - center[0]).powi(2) + (p.y - center[1]).powi(2) <= radius * radius;
        let side = Vector3::x() * 2.0 * radius;
        self.rect(lo, side, Vector3::y() * 2.0 * radius, Vector3::z(), label, class, &inside);
    }
}

fn random_shape(rng: &mut ChaCha8Rng, table: bool) -> Shape {
    if table {
        return Shape::Table {
            size: [rng.random_range(0.8..1.1), rng.random_range(0.6..0.8), rng.random_range(0.65..0.75)],
            top: 0.045,
            leg: 0.07,
        };
    }
    if rng.random_bool(0.5) {
        Shape::Cuboid { size: [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.9)] }
    } else {
        Shape::Cylinder { radius: rng.random_range(0.15..0.25), height: rng.random_range(0.4..0.9) }
    }
}

fn place_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Object>, SynthError> {
    let mut failed_at = 0;
    for _ in 0..LAYOUT_RESTARTS {
        match try_layout(cfg, rng) {
            Ok(objects) => return Ok(objects),
            Err(object) => failed_at = object,
        }
    }
    Err(SynthError::Placement { object: failed_at, attempts: LAYOUT_RESTARTS * PLACEMENT_ATTEMPTS })
}

/// One rejection-sampling pass; on failure returns the object that did not fit.
fn try_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Object>, usize> {
    let [w, d, _] = cfg.room;
    let mut objects: Vec<Object> = Vec::with_capacity(cfg.object_count);
    for object in 0..cfg.object_count {
        // the first object is always a table so floor patches sit inside a box
        let extra_table = rng.random_bool(0.15);
        let shape = random_shape(rng, object == 0 || extra_table);
        let [hx, hy] = Object { center: [0.0, 0.0], shape }.half_extent();
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center = if cfg.occlusion {
                let r = 0.36 * w.min(d) * rng.random::<f64>().sqrt();
                let a = TAU * rng.random::<f64>();
                [w / 2.0 + r * a.cos(), d / 2.0 + r * a.sin()]
            } else {
                [rng.random_range(0.0..w), rng.random_range(0.0..d)]
            };
            let candidate = Object { center, shape };
            let in_room = center[0] - hx >= WALL_MARGIN
                && center[0] + hx <= w - WALL_MARGIN
                && center[1] - hy >= WALL_MARGIN
                && center[1] + hy <= d - WALL_MARGIN;
            if in_room && objects.iter().all(|o| o.separated_from(&candidate, OBJECT_GAP)) {
                placed = Some(candidate);
                break;
            }
        }
        objects.push(placed.ok_or(object)?);
    }
    Ok(objects)
}

/// Tilt direction of floor tile (i, j): one of four diagonals chosen by the
/// parity of both indices, so all eight neighbours differ.
fn tile_normal(i: usize, j: usize) -> Vector3<f64> {
    let azimuth = PI / 4.0 + PI / 2.0 * ((i % 2) * 2 + (j % 2)) as f64;
    let tilt = TILE_TILT_DEG.to_radians();
    Vector3::new(tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos())
}

fn sample_room(cfg: &SynthConfig, objects: &[Object], s: &mut Sampler) {
    let [w, d, h] = cfg.room;
    let (nx, ny) = ((w / TILE).ceil() as usize, (d / TILE).ceil() as usize);
    let lift = TILE * TILE_TILT_DEG.to_radians().tan();
    for i in 0..nx {
        for j in 0..ny {
            let (x0, y0) = (i as f64 * TILE, j as f64 * TILE);
            let (tx, ty) = ((x0 + TILE).min(w) - x0, (y0 + TILE).min(d) - y0);
            let n = tile_normal(i, j);
            let c = Vector3::new(x0 + tx / 2.0, y0 + ty / 2.0, lift);
            // plane through c with normal n, parameterized over x and y
            let height = |x: f64, y: f64| c.z - (n.x * (x - c.x) + n.y * (y - c.y)) / n.z;
            let origin = Vector3::new(x0, y0, height(x0, y0));
            let a = Vector3::new(tx, 0.0, height(x0 + tx, y0) - origin.z);
            let b = Vector3::new(0.0, ty, height(x0, y0 + ty) - origin.z);
            let free = |p: &Vector3<f64>| !objects.iter().any(|o| o.covers_floor(p.x, p.y, FLOOR_CLEARANCE));
            s.rect(origin, a, b, n, BACKGROUND, CLASS_FLOOR, &free);
        }
    }
    let all = |_: &Vector3<f64>| true;
    let up = Vector3::z() * h;
    s.rect(Vector3::zeros(), Vector3::x() * w, up, Vector3::y(), BACKGROUND, CLASS_WALL, &all);
    s.rect(Vector3::new(0.0, d, 0.0), Vector3::x() * w, up, -Vector3::y(), BACKGROUND, CLASS_WALL, &all);
    s.rect(Vector3::zeros(), Vector3::y() * d, up, Vector3::x(), BACKGROUND, CLASS_WALL, &all);
    s.rect(Vector3::new(w, 0.0, 0.0), Vector3::y() * d, up, -Vector3::x(), BACKGROUND, CLASS_WALL, &all);
}

fn sample_object(o: &Object, label: i32, s: &mut Sampler) {
    let [cx, cy] = o.center;
    match o.shape {
        Shape::Cuboid { size } => {
            let lo = Vector3::new(cx - size[0] / 2.0, cy - size[1] / 2.0, 0.0);
            s.cuboid(lo, lo + Vector3::new(size[0], size[1], size[2]), label, CLASS_BOX);
        }
        Shape::Cylinder { radius, height } => s.cylinder(o.center, radius, height, label, CLASS_CYLINDER),
        Shape::Table { size, top, .. } => {
            let lo = Vector3::new(cx - size[0] / 2.0, cy - size[1] / 2.0, size[2] - top);
            s.cuboid(lo, Vector3::new(cx + size[0] / 2.0, cy + size[1] / 2.0, size[2]), label, CLASS_TABLE);
            for [lx, ly, leg] in o.legs() {
                let lo = Vector3::new(lx - leg / 2.0, ly - leg / 2.0, 0.0);
                let hi = Vector3::new(lx + leg / 2.0, ly + leg / 2.0, size[2] - top);
                // legs end under the slab; no cap needed
                let d = hi - lo;
                let all = |_: &Vector3<f64>| true;
                let (ex, ey, ez) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
                s.rect(lo, ex, ez, -Vector3::y(), label, CLASS_TABLE, &all);
                s.rect(Vector3::new(lo.x, hi.y, lo.z), ex, ez, Vector3::y(), label, CLASS_TABLE, &all);
                s.rect(lo, ey, ez, -Vector3::x(), label, CLASS_TABLE, &all);
                s.rect(Vector3::new(hi.x, lo.y, lo.z), ey, ez, Vector3::x(), label, CLASS_TABLE, &all);
            }
        }
    }
}

/// World-to-camera extrinsics looking from `eye` at `target` with +z up:
/// camera x right, y down, z forward.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Matrix3x4<f64> {
    let f = (target - eye).normalize();
    let right = f.cross(&Vector3::z()).normalize();
    let down = f.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
    let t = -(r * eye);
    Matrix3x4::from_columns(&[r.column(0).into(), r.column(1).into(), r.column(2).into(), t])
}

fn palette(label: i32, class: i32) -> [f32; 3] {
    if label == BACKGROUND {
        return if class == CLASS_FLOOR { [0.55, 0.45, 0.35] } else { [0.85, 0.85, 0.8] };
    }
    let hue = (label as f32 * 0.618_034).fract();
    // fully saturated HSV hue, compressed into [0.2, 0.9]
    let channel = |n: f32| {
        let k = (n + hue * 6.0) % 6.0;
        0.2 + 0.7 * (1.0 - k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [channel(5.0), channel(3.0), channel(1.0)]
}

fn cameras(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(Matrix3<f64>, Matrix3x4<f64>)> {
    let [w, d, _] = cfg.room;
    let k = Matrix3::new(
        cfg.focal_px,
        0.0,
        cfg.image_width as f64 / 2.0,
        0.0,
        cfg.focal_px,
        cfg.image_height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let radius = 0.42 * w.min(d);
    let phase = TAU * rng.random::<f64>();
    (0..cfg.view_count)
        .map(|i| {
            let angle = phase + TAU * i as f64 / cfg.view_count as f64;
            let height = if i % 2 == 0 { 1.25 } else { 1.6 } + rng.random_range(-0.05..0.05);
            let eye = Vector3::new(w / 2.0 + radius * angle.cos(), d / 2.0 + radius * angle.sin(), height);
            let target = Vector3::new(w / 2.0, d / 2.0, 0.35);
            (k, look_at(eye, target))
        })
        .collect()
}

pub fn generate_scene(cfg: &SynthConfig) -> Result<Scene, SynthError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = place_objects(cfg, &mut rng)?;
    let mut sampler = Sampler {
        rng: &mut rng,
        density: cfg.points_per_m2,
        points: Vec::new(),
        normals: Vec::new(),
        labels: Vec::new(),
        classes: Vec::new(),
    };
    sample_room(cfg, &objects, &mut sampler);
    for (label, o) in objects.iter().enumerate() {
        sample_object(o, label as i32, &mut sampler);
    }
    let Sampler { points, normals, labels, classes, .. } = sampler;
    let colors: Vec<[f32; 3]> = labels.iter().zip(&classes).map(|(&l, &c)| palette(l, c)).collect();

    let mut scene =
        Scene { points, normals: Some(normals), colors: Some(colors), gt_labels: Some(labels), ..Scene::default() };
    scene.boxes = objects
        .iter()
        .enumerate()
        .map(|(label, o)| {
            let id = label as i32;
            let (lo, hi) = scene.points.iter().zip(scene.gt_labels.as_ref().unwrap()).filter(|(_, &l)| l == id).fold(
                (Point3::new(f64::MAX, f64::MAX, f64::MAX), Point3::new(f64::MIN, f64::MIN, f64::MIN)),
                |(lo, hi), (p, _)| (lo.component_min(*p), hi.component_max(*p)),
            );
            InstanceBox { instance_id: id, semantic_class: o.class(), c_min: lo, c_max: hi }
        })
        .collect();

    let rigs = cameras(cfg, &mut rng);
    scene.views = rigs
        .par_iter()
        .enumerate()
        .map(|(id, (k, p))| {
            let blank = DepthImage::empty(cfg.image_width, cfg.image_height, DEPTH_SCALE_MM);
            let probe = CameraView::new(id as u32, *k, *p, blank);
            let splat = splat_points(&scene.points, scene.gt_labels.as_deref(), &probe, DEFAULT_FOOTPRINT);
            let depth = DepthImage::from_meters(cfg.image_width, cfg.image_height, DEPTH_SCALE_MM, &splat.depth);
            let view = probe.with_depth(depth);
            if cfg.rgb {
                view.with_rgb(render_rgb(&splat.labels, &splat.depth, cfg))
            } else {
                view
            }
        })
        .collect();
    Ok(scene)
}

/// Flat-shaded label colors darkened with distance.
fn render_rgb(labels: &[i32], depth: &[f32], cfg: &SynthConfig) -> RgbImage {
    let data = labels
        .iter()
        .zip(depth)
        .flat_map(|(&l, &z)| {
            if z <= 0.0 {
                return [0u8; 3];
            }
            let base = palette(l, if l == BACKGROUND { CLASS_WALL } else { CLASS_BOX });
            let shade = (1.0 - 0.08 * z).clamp(0.3, 1.0);
            base.map(|c| (c * shade * 255.0).round() as u8)
        })
        .collect();
    RgbImage { width: cfg.image_width, height: cfg.image_height, data }
}

/// Writes `count` scenes with seeds `base_seed + i` to `out/scene_NNN`.
pub fn generate_suite(
    count: usize,
    template: &SynthConfig,
    base_seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, SynthError> {
    if count == 0 {
        return Err(SynthError::InvalidConfig("suite needs at least one scene".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let cfg = SynthConfig { seed: base_seed.wrapping_add(i as u64), ..template.clone() };
            let scene = generate_scene(&cfg)?;
            let dir = out.join(format!("scene_{i:03}"));
            save_scene_bundle(&scene, &dir)?;
            Ok(dir)
        })
        .collect()
}
