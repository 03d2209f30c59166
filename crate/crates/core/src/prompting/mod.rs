//! Complementary prompting: a foreground box around an instance's projected
//! candidates, background points in the empty windows next to them, and the
//! merge of the resulting score masks.

pub mod oracle;
pub mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;

pub use oracle::{OracleNoise, OracleSegmenter};
pub use remote::{RemoteSegmenter, ENDPOINT_ENV};

pub const DEFAULT_WINDOW: u32 = 32;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("segmenter unreachable: {0}")]
    Transport(String),
    #[error("segmenter protocol violation: {0}")]
    Protocol(String),
    #[error("segmenter rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("mask dimensions {found:?} do not match {expected:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error("view {0} unknown to the segmenter")]
    UnknownView(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    /// Inclusive pixel box.
    ForegroundBox {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
    BackgroundPoint {
        x: u32,
        y: u32,
    },
}

impl Prompt {
    pub fn check(&self, width: u32, height: u32) -> Result<(), SegmentError> {
        let ok = match *self {
            Prompt::ForegroundBox { x_min, y_min, x_max, y_max } => {
                x_min <= x_max && y_min <= y_max && x_max < width && y_max < height
            }
            Prompt::BackgroundPoint { x, y } => x < width && y < height,
        };
        if ok {
            Ok(())
        } else {
            Err(SegmentError::InvalidPrompt(format!("{self:?} outside {width}x{height} image")))
        }
    }
}

/// Dense per-pixel scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMask {
    pub width: u32,
    pub height: u32,
    pub scores: Vec<f32>,
}

impl ScoreMask {
    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self { width, height, scores: vec![value; width as usize * height as usize] }
    }

    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.scores[(y * self.width + x) as usize]
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn in_unit_range(&self) -> bool {
        self.scores.iter().all(|s| (0.0..=1.0).contains(s))
    }

    /// Checks the adapter contract for a mask returned for `view`.
    pub fn check_for(&self, view: &CameraView) -> Result<(), SegmentError> {
        let expected = (view.width(), view.height());
        if self.dims() != expected || self.scores.len() != view.pixel_count() {
            return Err(SegmentError::DimensionMismatch { expected, found: self.dims() });
        }
        if !self.in_unit_range() {
            return Err(SegmentError::Protocol("scores outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptMode {
    /// One call per prompt, merged as `fg - beta * max(bg)`.
    #[default]
    Merged,
    /// One call with the box as positive and background points as negatives.
    SingleCombined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    #[serde(default)]
    pub mode: PromptMode,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_window")]
    pub window: u32,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_window() -> u32 {
    DEFAULT_WINDOW
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { mode: PromptMode::Merged, beta: DEFAULT_BETA, window: DEFAULT_WINDOW }
    }
}

impl SegmenterConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.window == 0 {
            return Err("window must be >= 1".into());
        }
        Ok(())
    }
}

/// A promptable 2D segmenter. Implementations must return masks with the
/// view's dimensions and scores in `[0, 1]`.
pub trait Segmenter: Sync {
    fn segment(&self, view: &CameraView, prompt: &Prompt) -> Result<ScoreMask, SegmentError>;

    /// Box prompt with negative point prompts in a single call.
    fn segment_combined(
        &self,
        view: &CameraView,
        foreground: &Prompt,
        negatives: &[Prompt],
    ) -> Result<ScoreMask, SegmentError>;
}

/// Bounding box of `pixels`, clipped to the image.
pub fn foreground_box_prompt(pixels: &[(i64, i64)], width: u32, height: u32) -> Result<Prompt, SegmentError> {
    let Some(&(x0, y0)) = pixels.first() else {
        return Err(SegmentError::InvalidPrompt("no projected pixels for foreground box".into()));
    };
    let (mut x_min, mut y_min, mut x_max, mut y_max) = (x0, y0, x0, y0);
    for &(x, y) in pixels {
        x_min = x_min.min(x);
        y_min = y_min.min(y);
        x_max = x_max.max(x);
        y_max = y_max.max(y);
    }
    let cx = |v: i64| v.clamp(0, width as i64 - 1) as u32;
    let cy = |v: i64| v.clamp(0, height as i64 - 1) as u32;
    Ok(Prompt::ForegroundBox { x_min: cx(x_min), y_min: cy(y_min), x_max: cx(x_max), y_max: cy(y_max) })
}

/// Background points at the centers of empty `window`-sized cells that touch
/// (8-adjacency) a cell holding a projected pixel, in row-major cell order.
pub fn background_window_prompts(pixels: &[(u32, u32)], width: u32, height: u32, window: u32) -> Vec<Prompt> {
    assert!(window >= 1, "window must be positive");
    let cols = width.div_ceil(window) as usize;
    let rows = height.div_ceil(window) as usize;
    let mut occupied = vec![false; rows * cols];
    for &(x, y) in pixels {
        if x < width && y < height {
            occupied[(y / window) as usize * cols + (x / window) as usize] = true;
        }
    }
    let mut prompts = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if occupied[r * cols + c] {
                continue;
            }
            let touches = (r.saturating_sub(1)..=(r + 1).min(rows - 1))
                .any(|rr| (c.saturating_sub(1)..=(c + 1).min(cols - 1)).any(|cc| occupied[rr * cols + cc]));
            if touches {
                // center of the cell, clipped for partial edge cells
                let x0 = c as u32 * window;
                let y0 = r as u32 * window;
                let x1 = (x0 + window).min(width) - 1;
                let y1 = (y0 + window).min(height) - 1;
                prompts.push(Prompt::BackgroundPoint { x: (x0 + x1) / 2, y: (y0 + y1) / 2 });
            }
        }
    }
    prompts
}

/// `fg - beta * max(bgs)` per pixel; `fg` unchanged without background masks.
pub fn merge_masks(fg: &ScoreMask, bgs: &[ScoreMask], beta: f64) -> Result<ScoreMask, SegmentError> {
    if let Some(bad) = bgs.iter().find(|m| m.dims() != fg.dims()) {
        return Err(SegmentError::DimensionMismatch { expected: fg.dims(), found: bad.dims() });
    }
    if bgs.is_empty() {
        return Ok(fg.clone());
    }
    let scores = (0..fg.scores.len())
        .map(|i| {
            let bg = bgs.iter().map(|m| m.scores[i]).fold(f32::NEG_INFINITY, f32::max);
            (fg.scores[i] as f64 - beta * bg as f64) as f32
        })
        .collect();
    Ok(ScoreMask { width: fg.width, height: fg.height, scores })
}

/// Merged score mask of one instance in one view, from the rounded pixels of
/// its visible candidate points.
pub fn instance_view_mask(
    segmenter: &dyn Segmenter,
    view: &CameraView,
    pixels: &[(u32, u32)],
    cfg: &SegmenterConfig,
) -> Result<ScoreMask, SegmentError> {
    let signed: Vec<(i64, i64)> = pixels.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    let fg_prompt = foreground_box_prompt(&signed, view.width(), view.height())?;
    let bg_prompts = background_window_prompts(pixels, view.width(), view.height(), cfg.window);
    let checked = |mask: ScoreMask| mask.check_for(view).map(|_| mask);
    match cfg.mode {
        PromptMode::Merged => {
            let fg = checked(segmenter.segment(view, &fg_prompt)?)?;
            let bgs = bg_prompts
                .iter()
                .map(|p| segmenter.segment(view, p).and_then(checked))
                .collect::<Result<Vec<_>, _>>()?;
            merge_masks(&fg, &bgs, cfg.beta)
        }
        PromptMode::SingleCombined => checked(segmenter.segment_combined(view, &fg_prompt, &bg_prompts)?),
    }
}
