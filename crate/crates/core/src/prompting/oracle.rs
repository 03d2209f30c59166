//! Ground-truth segmenter: answers prompts from rendered instance label
//! images, optionally degraded by seeded boundary and score noise.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Prompt, ScoreMask, SegmentError, Segmenter};
use crate::camera::{render_gt, CameraView, RenderError, DEFAULT_FOOTPRINT};
use crate::scene::{Scene, BACKGROUND};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoise {
    /// Boundary erosion radius in pixels (square structuring element).
    pub erode_px: u32,
    /// Boundary dilation radius in pixels, applied after erosion.
    pub dilate_px: u32,
    /// Half-width of the additive uniform score jitter.
    pub jitter: f64,
    /// Probability of answering with a region adjacent to the right one.
    pub mislabel: f64,
    pub seed: u64,
}

impl OracleNoise {
    pub fn is_noise_free(&self) -> bool {
        self.erode_px == 0 && self.dilate_px == 0 && self.jitter == 0.0 && self.mislabel == 0.0
    }
}

struct LabelImage {
    width: u32,
    height: u32,
    labels: Vec<i32>,
    /// 4-adjacency between distinct labels.
    adjacent: BTreeMap<i32, BTreeSet<i32>>,
}

impl LabelImage {
    fn new(width: u32, height: u32, labels: Vec<i32>) -> Self {
        let mut adjacent: BTreeMap<i32, BTreeSet<i32>> = BTreeMap::new();
        let (w, h) = (width as usize, height as usize);
        let mut link = |a: i32, b: i32| {
            if a != b {
                adjacent.entry(a).or_default().insert(b);
                adjacent.entry(b).or_default().insert(a);
            }
        };
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x];
                if x + 1 < w {
                    link(l, labels[y * w + x + 1]);
                }
                if y + 1 < h {
                    link(l, labels[(y + 1) * w + x]);
                }
            }
        }
        Self { width, height, labels, adjacent }
    }

    fn majority_in_box(&self, x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Option<i32> {
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for y in y_min..=y_max {
            for x in x_min..=x_max {
                let l = self.labels[(y * self.width + x) as usize];
                if l != BACKGROUND {
                    *counts.entry(l).or_default() += 1;
                }
            }
        }
        // BTreeMap iterates ascending, so strict > keeps the lowest id on ties
        counts
            .into_iter()
            .fold(None, |best: Option<(i32, usize)>, (l, n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((l, n)),
            })
            .map(|(l, _)| l)
    }
}

/// Answers prompts from the scene's ground truth.
///
/// A box prompt selects the instance with the most rendered pixels inside the
/// box (ties: lowest id); a point prompt selects whatever region is rendered
/// at the point, including the background region. The mask is 1 on the
/// selected region and 0 elsewhere before noise.
pub struct OracleSegmenter {
    images: HashMap<u32, LabelImage>,
    noise: OracleNoise,
}

impl OracleSegmenter {
    pub fn new(scene: &Scene, noise: OracleNoise) -> Result<Self, RenderError> {
        let images = scene
            .views
            .par_iter()
            .map(|v| {
                let splat = render_gt(scene, v, DEFAULT_FOOTPRINT)?;
                Ok((v.id(), LabelImage::new(splat.width, splat.height, splat.labels)))
            })
            .collect::<Result<HashMap<_, _>, RenderError>>()?;
        Ok(Self { images, noise })
    }

    pub fn noise(&self) -> &OracleNoise {
        &self.noise
    }

    fn image_for(&self, view: &CameraView) -> Result<&LabelImage, SegmentError> {
        let img = self.images.get(&view.id()).ok_or(SegmentError::UnknownView(view.id()))?;
        if (img.width, img.height) != (view.width(), view.height()) {
            return Err(SegmentError::DimensionMismatch {
                expected: (view.width(), view.height()),
                found: (img.width, img.height),
            });
        }
        Ok(img)
    }

    fn answer(&self, img: &LabelImage, view_id: u32, prompt: &Prompt) -> ScoreMask {
        let mut rng = call_rng(self.noise.seed, view_id, prompt);
        let (target, instances_only) = match *prompt {
            Prompt::ForegroundBox { x_min, y_min, x_max, y_max } => {
                (img.majority_in_box(x_min, y_min, x_max, y_max), true)
            }
            Prompt::BackgroundPoint { x, y } => (Some(img.labels[(y * img.width + x) as usize]), false),
        };
        let mislabel_draw: f64 = rng.random();
        let target = match target {
            Some(t) if mislabel_draw < self.noise.mislabel => {
                let options: Vec<i32> = img
                    .adjacent
                    .get(&t)
                    .into_iter()
                    .flatten()
                    .copied()
                    .filter(|&l| !instances_only || l != BACKGROUND)
                    .collect();
                if options.is_empty() {
                    Some(t)
                } else {
                    Some(options[rng.random_range(0..options.len())])
                }
            }
            other => other,
        };
        let mut binary: Vec<bool> = match target {
            Some(t) => img.labels.iter().map(|&l| l == t).collect(),
            None => vec![false; img.labels.len()],
        };
        let (w, h) = (img.width as usize, img.height as usize);
        if self.noise.erode_px > 0 {
            binary = morph(&binary, w, h, self.noise.erode_px as usize, false);
        }
        if self.noise.dilate_px > 0 {
            binary = morph(&binary, w, h, self.noise.dilate_px as usize, true);
        }
        let j = self.noise.jitter;
        let scores = binary
            .iter()
            .map(|&b| {
                let base = if b { 1.0 } else { 0.0 };
                if j > 0.0 {
                    (base + rng.random_range(-j..=j)).clamp(0.0, 1.0) as f32
                } else {
                    base as f32
                }
            })
            .collect();
        ScoreMask { width: img.width, height: img.height, scores }
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, view: &CameraView, prompt: &Prompt) -> Result<ScoreMask, SegmentError> {
        let img = self.image_for(view)?;
        prompt.check(img.width, img.height)?;
        Ok(self.answer(img, view.id(), prompt))
    }

    /// Foreground mask minus the maximum of the negative-point masks, clipped
    /// to `[0, 1]`.
    fn segment_combined(
        &self,
        view: &CameraView,
        foreground: &Prompt,
        negatives: &[Prompt],
    ) -> Result<ScoreMask, SegmentError> {
        let mut out = self.segment(view, foreground)?;
        let bgs = negatives.iter().map(|p| self.segment(view, p)).collect::<Result<Vec<_>, _>>()?;
        for (i, s) in out.scores.iter_mut().enumerate() {
            let bg = bgs.iter().map(|m| m.scores[i]).fold(0.0f32, f32::max);
            *s = (*s - bg).clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Square-window min (erosion) or max (dilation) filter of radius `r`,
/// separable in rows and columns. Out-of-image pixels are ignored.
fn morph(mask: &[bool], w: usize, h: usize, r: usize, dilate: bool) -> Vec<bool> {
    let pass = |src: &[bool], along_x: bool| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (c, len) = if along_x { (x, w) } else { (y, h) };
                let lo = c.saturating_sub(r);
                let hi = (c + r).min(len - 1);
                let mut window = (lo..=hi).map(|k| if along_x { src[y * w + k] } else { src[k * w + x] });
                out[y * w + x] = if dilate { window.any(|v| v) } else { window.all(|v| v) };
            }
        }
        out
    };
    let rows = pass(mask, true);
    pass(&rows, false)
}

fn splitmix(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per (seed, view, prompt) so answers do not depend on
/// call order.
fn call_rng(seed: u64, view_id: u32, prompt: &Prompt) -> ChaCha8Rng {
    let words: [u64; 5] = match *prompt {
        Prompt::ForegroundBox { x_min, y_min, x_max, y_max } => {
            [1, x_min as u64, y_min as u64, x_max as u64, y_max as u64]
        }
        Prompt::BackgroundPoint { x, y } => [2, x as u64, y as u64, 0, 0],
    };
    let mut h = splitmix(seed ^ splitmix(view_id as u64));
    for w in words {
        h = splitmix(h ^ w);
    }
    ChaCha8Rng::seed_from_u64(h)
}
