//! HTTP/JSON client for an external promptable segmentation service.
//!
//! `POST {endpoint}/segment` with a [`SegmentRequest`]; the service answers
//! with a [`SegmentResponse`] carrying row-major little-endian `f32` scores.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Prompt, ScoreMask, SegmentError, Segmenter};
use crate::camera::{CameraView, RgbImage};

pub const ENDPOINT_ENV: &str = "SEGMENTER_ENDPOINT";

const RESPONSE_LIMIT: u64 = 256 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WirePrompt {
    Box {
        xyxy: [u32; 4],
        /// Negative point prompts sent together with the box.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        negative_points: Vec<[u32; 2]>,
    },
    Point {
        xy: [u32; 2],
        /// 1 for a positive point, 0 for a negative one.
        label: u8,
    },
}

impl WirePrompt {
    /// Background points are sent as positive points: the service is asked
    /// for the region under the point, which is then subtracted locally.
    pub fn from_prompt(prompt: &Prompt) -> Self {
        match *prompt {
            Prompt::ForegroundBox { x_min, y_min, x_max, y_max } => {
                WirePrompt::Box { xyxy: [x_min, y_min, x_max, y_max], negative_points: Vec::new() }
            }
            Prompt::BackgroundPoint { x, y } => WirePrompt::Point { xy: [x, y], label: 1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png_b64: Option<String>,
    pub prompt: WirePrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub width: u32,
    pub height: u32,
    pub scores_f32_b64: String,
}

impl SegmentResponse {
    pub fn from_mask(mask: &ScoreMask) -> Self {
        let bytes: Vec<u8> = mask.scores.iter().flat_map(|s| s.to_le_bytes()).collect();
        Self { width: mask.width, height: mask.height, scores_f32_b64: B64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<ScoreMask, SegmentError> {
        let bytes = B64
            .decode(&self.scores_f32_b64)
            .map_err(|e| SegmentError::Protocol(format!("scores are not base64: {e}")))?;
        let expected = self.width as usize * self.height as usize * 4;
        if bytes.len() != expected {
            return Err(SegmentError::Protocol(format!(
                "payload has {} bytes, {}x{} needs {expected}",
                bytes.len(),
                self.width,
                self.height
            )));
        }
        let scores = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(ScoreMask { width: self.width, height: self.height, scores })
    }
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, png::EncodingError> {
    let mut buf = Vec::new();
    let mut encoder = png::Encoder::new(&mut buf, image.width, image.height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&image.data)?;
    writer.finish()?;
    Ok(buf)
}

/// Segmenter backed by a remote service. Responses are cached by a content
/// hash of (image, prompt), and each frame is uploaded at most once.
pub struct RemoteSegmenter {
    endpoint: String,
    agent: ureq::Agent,
    cache: Mutex<HashMap<[u8; 32], ScoreMask>>,
    uploaded: Mutex<HashSet<String>>,
    requests: AtomicUsize,
}

impl RemoteSegmenter {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            cache: Mutex::new(HashMap::new()),
            uploaded: Mutex::new(HashSet::new()),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()).map(Self::new)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Number of HTTP requests actually sent.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn request(&self, view: &CameraView, prompt: WirePrompt) -> Result<ScoreMask, SegmentError> {
        let image_id = image_id(view);
        let key = cache_key(&image_id, &prompt);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let first_upload = !self.uploaded.lock().unwrap().contains(&image_id);
        let image_png_b64 = match view.rgb() {
            Some(rgb) if first_upload => Some(
                B64.encode(encode_png(rgb).map_err(|e| SegmentError::Protocol(format!("cannot encode frame: {e}")))?),
            ),
            _ => None,
        };
        let body = SegmentRequest {
            image_id: image_id.clone(),
            width: view.width(),
            height: view.height(),
            image_png_b64,
            prompt,
        };
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut resp = self
            .agent
            .post(format!("{}/segment", self.endpoint))
            .send_json(&body)
            .map_err(|e| SegmentError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(SegmentError::Rejected { status, body: text });
        }
        let parsed: SegmentResponse = resp
            .body_mut()
            .with_config()
            .limit(RESPONSE_LIMIT)
            .read_json()
            .map_err(|e| SegmentError::Protocol(format!("malformed response: {e}")))?;
        let mask = parsed.decode()?;
        mask.check_for(view)?;
        self.uploaded.lock().unwrap().insert(image_id);
        self.cache.lock().unwrap().insert(key, mask.clone());
        Ok(mask)
    }
}

impl Segmenter for RemoteSegmenter {
    fn segment(&self, view: &CameraView, prompt: &Prompt) -> Result<ScoreMask, SegmentError> {
        prompt.check(view.width(), view.height())?;
        self.request(view, WirePrompt::from_prompt(prompt))
    }

    fn segment_combined(
        &self,
        view: &CameraView,
        foreground: &Prompt,
        negatives: &[Prompt],
    ) -> Result<ScoreMask, SegmentError> {
        foreground.check(view.width(), view.height())?;
        let Prompt::ForegroundBox { x_min, y_min, x_max, y_max } = *foreground else {
            return Err(SegmentError::InvalidPrompt("combined call needs a box prompt".into()));
        };
        let mut negative_points = Vec::with_capacity(negatives.len());
        for p in negatives {
            p.check(view.width(), view.height())?;
            match *p {
                Prompt::BackgroundPoint { x, y } => negative_points.push([x, y]),
                _ => return Err(SegmentError::InvalidPrompt("negatives must be points".into())),
            }
        }
        self.request(view, WirePrompt::Box { xyxy: [x_min, y_min, x_max, y_max], negative_points })
    }
}

/// Stable frame identifier: view id plus a digest of the frame content.
pub fn image_id(view: &CameraView) -> String {
    let mut h = Sha256::new();
    h.update(view.width().to_le_bytes());
    h.update(view.height().to_le_bytes());
    match view.rgb() {
        Some(rgb) => h.update(&rgb.data),
        None => {
            for d in view.depth().raw() {
                h.update(d.to_le_bytes());
            }
        }
    }
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("view{}-{hex}", view.id())
}

fn cache_key(image_id: &str, prompt: &WirePrompt) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(prompt).expect("prompt serializes"));
    h.finalize().into()
}
