//! On-disk scene bundles: a `manifest.json` plus raw little-endian arrays and
//! netpbm depth/color frames.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraView, DepthImage, RgbImage};
use crate::scene::{validate_scene, InstanceBox, Point3, Scene, SuperpointPartition, Violation};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle format error: {0}")]
    Format(String),
    #[error("scene validation failed: {}", summarize(.0))]
    Validation(Vec<Violation>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn summarize(violations: &[Violation]) -> String {
    let mut parts: Vec<String> = violations.iter().take(5).map(ToString::to_string).collect();
    if violations.len() > 5 {
        parts.push(format!("and {} more", violations.len() - 5));
    }
    parts.join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    point_count: usize,
    arrays: ArrayRefs,
    #[serde(default)]
    boxes: Vec<InstanceBox>,
    #[serde(default)]
    views: Vec<ViewEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayRefs {
    points: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normals: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    colors: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    superpoints: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewEntry {
    id: u32,
    width: u32,
    height: u32,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "P")]
    p: [f64; 12],
    depth: String,
    depth_scale_mm_per_unit: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rgb: Option<String>,
}

/// Reads a bundle directory and validates the resulting scene.
pub fn load_scene_bundle(dir: impl AsRef<Path>) -> Result<Scene, BundleError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(BundleError::Format(format!("missing {}", manifest_path.display())));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| BundleError::Format(format!("{}: {e}", manifest_path.display())))?;
    let n = manifest.point_count;

    let mut mismatches = Vec::new();
    let mut expect = |array: &'static str, found: usize, per_point: usize| {
        if found != n * per_point {
            mismatches.push(Violation::LengthMismatch { array, expected: n, found: found / per_point.max(1) });
        }
    };

    let raw_points = read_f32(&dir.join(&manifest.arrays.points))?;
    expect("points", raw_points.len(), 3);
    let normals = manifest.arrays.normals.as_ref().map(|f| read_f32(&dir.join(f))).transpose()?;
    if let Some(v) = &normals {
        expect("normals", v.len(), 3);
    }
    let colors = manifest.arrays.colors.as_ref().map(|f| read_f32(&dir.join(f))).transpose()?;
    if let Some(v) = &colors {
        expect("colors", v.len(), 3);
    }
    let gt_labels = manifest.arrays.gt_labels.as_ref().map(|f| read_i32(&dir.join(f))).transpose()?;
    if let Some(v) = &gt_labels {
        expect("gt_labels", v.len(), 1);
    }
    let superpoints = manifest.arrays.superpoints.as_ref().map(|f| read_i32(&dir.join(f))).transpose()?;
    if let Some(v) = &superpoints {
        expect("superpoints", v.len(), 1);
    }
    if !mismatches.is_empty() {
        return Err(BundleError::Validation(mismatches));
    }

    let to_points = |flat: Vec<f32>| -> Vec<Point3> {
        flat.chunks_exact(3).map(|c| Point3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect()
    };
    let superpoints = superpoints
        .map(|ids| {
            if let Some(bad) = ids.iter().position(|&v| v < 0) {
                return Err(BundleError::Format(format!("negative superpoint id at point {bad}")));
            }
            let count = ids.iter().map(|&v| v as usize + 1).max().unwrap_or(0);
            Ok(SuperpointPartition { assignment: ids.into_iter().map(|v| v as u32).collect(), superpoint_count: count })
        })
        .transpose()?;

    let views = manifest.views.iter().map(|entry| load_view(dir, entry)).collect::<Result<Vec<_>, _>>()?;

    let scene = Scene {
        points: to_points(raw_points),
        normals: normals.map(to_points),
        colors: colors.map(|flat| flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()),
        gt_labels,
        views,
        boxes: manifest.boxes,
        superpoints,
    };
    let report = validate_scene(&scene);
    if report.is_empty() {
        Ok(scene)
    } else {
        Err(BundleError::Validation(report))
    }
}

fn load_view(dir: &Path, entry: &ViewEntry) -> Result<CameraView, BundleError> {
    let depth_path = dir.join(&entry.depth);
    let (w, h, raw) = read_pgm16(&depth_path)?;
    if (w, h) != (entry.width, entry.height) {
        return Err(BundleError::Format(format!(
            "{}: depth is {w}x{h}, manifest says {}x{}",
            depth_path.display(),
            entry.width,
            entry.height
        )));
    }
    let k = Matrix3::from_row_slice(&entry.k);
    let p = Matrix3x4::from_row_slice(&entry.p);
    let depth = DepthImage::from_raw(w, h, entry.depth_scale_mm_per_unit, raw);
    let mut view = CameraView::new(entry.id, k, p, depth);
    if let Some(rgb) = &entry.rgb {
        let rgb_path = dir.join(rgb);
        let image = read_ppm(&rgb_path)?;
        if (image.width, image.height) != (w, h) {
            return Err(BundleError::Format(format!("{}: rgb size differs from depth", rgb_path.display())));
        }
        view = view.with_rgb(image);
    }
    Ok(view)
}

/// Writes `scene` to `dir`, creating it if needed and overwriting any
/// previous bundle files of the same names.
pub fn save_scene_bundle(scene: &Scene, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let flat = |pts: &[Point3]| -> Vec<f32> { pts.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect() };

    let mut arrays =
        ArrayRefs { points: "points.f32".into(), normals: None, colors: None, gt_labels: None, superpoints: None };
    write_f32(&dir.join(&arrays.points), &flat(&scene.points))?;
    if let Some(normals) = &scene.normals {
        let name = "normals.f32".to_string();
        write_f32(&dir.join(&name), &flat(normals))?;
        arrays.normals = Some(name);
    }
    if let Some(colors) = &scene.colors {
        let name = "colors.f32".to_string();
        let values: Vec<f32> = colors.iter().flatten().copied().collect();
        write_f32(&dir.join(&name), &values)?;
        arrays.colors = Some(name);
    }
    if let Some(labels) = &scene.gt_labels {
        let name = "gt.i32".to_string();
        write_i32(&dir.join(&name), labels)?;
        arrays.gt_labels = Some(name);
    }
    if let Some(sp) = &scene.superpoints {
        let name = "sp.i32".to_string();
        let ids: Vec<i32> = sp.assignment.iter().map(|&v| v as i32).collect();
        write_i32(&dir.join(&name), &ids)?;
        arrays.superpoints = Some(name);
    }

    let mut views = Vec::with_capacity(scene.views.len());
    for (slot, view) in scene.views.iter().enumerate() {
        let depth_name = format!("view_{slot:03}.pgm");
        let depth = view.depth();
        write_pgm16(&dir.join(&depth_name), depth.width(), depth.height(), depth.raw())?;
        let rgb_name = match view.rgb() {
            Some(rgb) => {
                let name = format!("view_{slot:03}.ppm");
                write_ppm(&dir.join(&name), rgb)?;
                Some(name)
            }
            None => None,
        };
        let mut k = [0.0; 9];
        let mut p = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                k[r * 3 + c] = view.intrinsics()[(r, c)];
            }
            for c in 0..4 {
                p[r * 4 + c] = view.extrinsics()[(r, c)];
            }
        }
        views.push(ViewEntry {
            id: view.id(),
            width: view.width(),
            height: view.height(),
            k,
            p,
            depth: depth_name,
            depth_scale_mm_per_unit: depth.scale_mm_per_unit(),
            rgb: rgb_name,
        });
    }

    let manifest = Manifest { point_count: scene.points.len(), arrays, boxes: scene.boxes.clone(), views };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| BundleError::Format(e.to_string()))?;
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))
}

/// Reads a boxes JSON file (same schema as the manifest's `boxes` field).
pub fn read_boxes(path: &Path) -> Result<Vec<InstanceBox>, BundleError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| BundleError::Format(format!("{}: {e}", path.display())))
}

pub fn write_boxes(path: &Path, boxes: &[InstanceBox]) -> Result<(), BundleError> {
    let text = serde_json::to_string_pretty(boxes).map_err(|e| BundleError::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>, BundleError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(BundleError::Format(format!("{}: size is not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<(), BundleError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_i32(path: &Path) -> Result<Vec<i32>, BundleError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(BundleError::Format(format!("{}: size is not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_i32(path: &Path, values: &[i32]) -> Result<(), BundleError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

/// Splits a netpbm header into `count` tokens, skipping `#` comments, and
/// returns them with the offset of the raster (one whitespace byte after the
/// last token).
fn netpbm_header(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize), BundleError> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(BundleError::Format(format!("{}: truncated netpbm header", path.display())));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i + 1))
}

fn parse_dims(tokens: &[String], magic: &str, path: &Path) -> Result<(u32, u32, u32), BundleError> {
    let bad = |what: &str| BundleError::Format(format!("{}: {what}", path.display()));
    if tokens[0] != magic {
        return Err(bad(&format!("expected {magic} magic, found {}", tokens[0])));
    }
    let num = |s: &String| s.parse::<u32>().map_err(|_| bad("malformed header number"));
    Ok((num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?))
}

/// Reads a 16-bit binary PGM (big-endian samples, maxval 65535).
pub fn read_pgm16(path: &Path) -> Result<(u32, u32, Vec<u16>), BundleError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (tokens, offset) = netpbm_header(&bytes, 4, path)?;
    let (w, h, maxval) = parse_dims(&tokens, "P5", path)?;
    if maxval != 65535 {
        return Err(BundleError::Format(format!("{}: depth maxval must be 65535", path.display())));
    }
    let n = w as usize * h as usize;
    let data = bytes
        .get(offset..offset + 2 * n)
        .ok_or_else(|| BundleError::Format(format!("{}: truncated raster", path.display())))?;
    Ok((w, h, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

pub fn write_pgm16(path: &Path, width: u32, height: u32, raw: &[u16]) -> Result<(), BundleError> {
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    bytes.extend(raw.iter().flat_map(|v| v.to_be_bytes()));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads an 8-bit binary PPM.
pub fn read_ppm(path: &Path) -> Result<RgbImage, BundleError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (tokens, offset) = netpbm_header(&bytes, 4, path)?;
    let (width, height, maxval) = parse_dims(&tokens, "P6", path)?;
    if maxval != 255 {
        return Err(BundleError::Format(format!("{}: only 8-bit PPM is supported", path.display())));
    }
    let n = width as usize * height as usize * 3;
    let data = bytes
        .get(offset..offset + n)
        .ok_or_else(|| BundleError::Format(format!("{}: truncated raster", path.display())))?
        .to_vec();
    Ok(RgbImage { width, height, data })
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<(), BundleError> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.data);
    fs::write(path, bytes).map_err(io_err(path))
}
