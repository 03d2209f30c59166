//! End-to-end refinement: superpoints, box noise, candidates, view
//! selection, prompting, confidence voting and evaluation, plus parameter
//! sweeps over a set of scenes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::box_noise::{perturb_scene_boxes, NoiseConfig};
use crate::bundle::{load_scene_bundle, read_boxes, write_boxes, write_i32};
use crate::camera::{project_point, VisibilityTolerance};
use crate::candidates::{build_candidate_map, CandidateMap};
use crate::confidence::{assign_labels, baseline_assign, baseline_scores, instance_confidence, ConfidenceTable};
use crate::eval::{evaluate, EvalReport};
use crate::prompting::{
    instance_view_mask, OracleNoise, OracleSegmenter, PromptMode, RemoteSegmenter, ScoreMask, Segmenter,
    SegmenterConfig, ENDPOINT_ENV,
};
use crate::scene::{InstanceBox, LabelMap, Scene, SuperpointPartition};
use crate::superpoints::{compute_superpoints, SegParams};
use crate::view_select::{build_view_cover, ViewCover};

pub const LABELS_FILE: &str = "labels.i32";
pub const BASELINE_FILE: &str = "baseline.i32";
pub const REPORT_FILE: &str = "report.json";
pub const BOXES_FILE: &str = "boxes.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Superpoints,
    BoxNoise,
    Candidates,
    ViewSelect,
    Prompting,
    Confidence,
    Eval,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::Superpoints => "superpoints",
            Stage::BoxNoise => "box-noise",
            Stage::Candidates => "candidate-init",
            Stage::ViewSelect => "view-select",
            Stage::Prompting => "prompting",
            Stage::Confidence => "confidence-vote",
            Stage::Eval => "eval",
            Stage::Write => "write",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Stage { stage, .. } => Some(*stage),
        }
    }
}

fn stage_err<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Backend {
    Oracle {
        #[serde(default)]
        noise: OracleNoise,
    },
    Remote {
        /// Falls back to the `SEGMENTER_ENDPOINT` environment variable.
        #[serde(default)]
        endpoint: Option<String>,
    },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Oracle { noise: OracleNoise::default() }
    }
}

/// Algorithm settings shared by single runs and sweeps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Perturb ground-truth boxes; `None` uses the scene's boxes as given.
    pub noise: Option<NoiseConfig>,
    pub segmenter: SegmenterConfig,
    /// `None` selects the remote backend when `SEGMENTER_ENDPOINT` is set and
    /// the noise-free oracle otherwise.
    pub backend: Option<Backend>,
    pub seg_params: SegParams,
    pub visibility: VisibilityTolerance,
    pub max_views: Option<usize>,
}

impl RefineConfig {
    pub fn check(&self) -> Result<(), PipelineError> {
        if let Some(n) = &self.noise {
            n.check().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.segmenter.check().map_err(PipelineError::Config)?;
        if self.seg_params.knn == 0 {
            return Err(PipelineError::Config("seg_params.knn must be >= 1".into()));
        }
        let tol = &self.visibility;
        if !(tol.abs_m >= 0.0 && tol.rel >= 0.0) {
            return Err(PipelineError::Config("visibility tolerances must be >= 0".into()));
        }
        if self.max_views == Some(0) {
            return Err(PipelineError::Config("max_views must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_backend(&self) -> Result<Backend, PipelineError> {
        match &self.backend {
            Some(Backend::Remote { endpoint: None }) => match std::env::var(ENDPOINT_ENV) {
                Ok(e) if !e.is_empty() => Ok(Backend::Remote { endpoint: Some(e) }),
                _ => Err(PipelineError::Config(format!("remote backend needs an endpoint or {ENDPOINT_ENV}"))),
            },
            Some(b) => Ok(b.clone()),
            None => Ok(match std::env::var(ENDPOINT_ENV) {
                Ok(e) if !e.is_empty() => Backend::Remote { endpoint: Some(e) },
                _ => Backend::default(),
            }),
        }
    }
}

/// A single refinement run on a scene bundle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub bundle: PathBuf,
    /// Boxes file replacing the bundle's boxes.
    pub boxes: Option<PathBuf>,
    #[serde(flatten)]
    pub refine: RefineConfig,
    pub output: Option<PathBuf>,
    /// Worker threads; `None` uses all cores.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceSummary {
    pub candidate_points: usize,
    pub candidate_superpoints: usize,
    pub selected_views: Vec<u32>,
    pub uncovered_points: usize,
    pub refined_points: usize,
    pub baseline_points: usize,
    pub score: f64,
}

/// Superpoint confidence histogram over `[-1, 1]` in 0.1-wide bins; values
/// outside the range go to the end bins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub unobserved: usize,
}

impl ConfidenceHistogram {
    fn from_table(table: &ConfidenceTable) -> Self {
        const BINS: usize = 20;
        let bin_edges = (0..=BINS).map(|i| -1.0 + 0.1 * i as f64).collect();
        let mut counts = vec![0; BINS];
        let mut unobserved = 0;
        for c in table.instances.iter().flat_map(|i| &i.sp_conf) {
            match c {
                Some(v) => counts[(((v + 1.0) / 0.1).floor().max(0.0) as usize).min(BINS - 1)] += 1,
                None => unobserved += 1,
            }
        }
        Self { bin_edges, counts, unobserved }
    }
}

/// Deterministic summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefineReport {
    pub points: usize,
    pub superpoints: usize,
    pub instances: BTreeMap<i32, InstanceSummary>,
    pub uncovered_points: usize,
    pub fallback_superpoints: usize,
    pub confidence_histogram: ConfidenceHistogram,
    pub refined: Option<EvalReport>,
    pub baseline: Option<EvalReport>,
}

/// Wall-clock timings; kept apart from the report because they vary.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub stage_seconds: BTreeMap<String, f64>,
    pub segment_calls: usize,
    pub backend: String,
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub labels: LabelMap,
    pub baseline: LabelMap,
    pub boxes: Vec<InstanceBox>,
    pub superpoints: SuperpointPartition,
    pub instance_scores: BTreeMap<i32, f64>,
    pub view_cover: ViewCover,
    pub report: RefineReport,
    pub diagnostics: Diagnostics,
}

struct Timer {
    stages: BTreeMap<String, f64>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Self { stages: BTreeMap::new(), last: Instant::now() }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        *self.stages.entry(stage.to_string()).or_default() += (now - self.last).as_secs_f64();
        self.last = now;
    }
}

pub fn make_segmenter(scene: &Scene, backend: &Backend) -> Result<Box<dyn Segmenter>, PipelineError> {
    match backend {
        Backend::Oracle { noise } => {
            Ok(Box::new(OracleSegmenter::new(scene, *noise).map_err(stage_err(Stage::Prompting))?))
        }
        Backend::Remote { endpoint: Some(e) } => Ok(Box::new(RemoteSegmenter::new(e.clone()))),
        Backend::Remote { endpoint: None } => Err(PipelineError::Config("remote backend without endpoint".into())),
    }
}

/// Computes the scene's superpoints when it has none.
pub fn ensure_superpoints(scene: &mut Scene, params: &SegParams) {
    if scene.superpoints.is_none() {
        scene.superpoints = Some(compute_superpoints(&scene.points, scene.normals.as_deref(), params));
    }
}

fn prompt_masks(
    scene: &Scene,
    candidates: &CandidateMap,
    cover: &ViewCover,
    segmenter: &dyn Segmenter,
    cfg: &SegmenterConfig,
) -> Result<Vec<Vec<ScoreMask>>, PipelineError> {
    let tasks: Vec<(usize, usize)> = cover
        .instances
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.selection.view_slots.len()).map(move |m| (i, m)))
        .collect();
    let masks: Vec<ScoreMask> = tasks
        .par_iter()
        .map(|&(i, m)| {
            let sel = &cover.instances[i].selection;
            let view = &scene.views[sel.view_slots[m]];
            let pixels: Vec<(u32, u32)> =
                sel.visible[m].iter().filter_map(|&p| project_point(&scene.points[p as usize], view).pixel()).collect();
            instance_view_mask(segmenter, view, &pixels, cfg).map_err(|e| PipelineError::Stage {
                stage: Stage::Prompting,
                message: format!("instance {} view {}: {e}", candidates.instances[i].instance_id, view.id()),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut grouped: Vec<Vec<ScoreMask>> = cover.instances.iter().map(|_| Vec::new()).collect();
    for ((i, _), mask) in tasks.into_iter().zip(masks) {
        grouped[i].push(mask);
    }
    Ok(grouped)
}

/// Runs every stage on an in-memory scene with the given segmenter.
pub fn refine_scene(
    scene: &Scene,
    cfg: &RefineConfig,
    segmenter: &dyn Segmenter,
) -> Result<RefineOutput, PipelineError> {
    cfg.check()?;
    let mut timer = Timer::new();
    let superpoints = match &scene.superpoints {
        Some(sp) => sp.clone(),
        None => compute_superpoints(&scene.points, scene.normals.as_deref(), &cfg.seg_params),
    };
    timer.lap(Stage::Superpoints);

    let boxes = match &cfg.noise {
        Some(noise) => perturb_scene_boxes(scene, noise).map_err(stage_err(Stage::BoxNoise))?,
        None => scene.boxes.clone(),
    };
    timer.lap(Stage::BoxNoise);

    let mut working = Scene { superpoints: Some(superpoints.clone()), ..scene.clone() };
    working.boxes = boxes.clone();
    let candidates = build_candidate_map(&working, &boxes).map_err(stage_err(Stage::Candidates))?;
    timer.lap(Stage::Candidates);

    let cover = build_view_cover(&candidates, &working, &cfg.visibility, cfg.max_views);
    timer.lap(Stage::ViewSelect);

    let masks = prompt_masks(&working, &candidates, &cover, segmenter, &cfg.segmenter)?;
    timer.lap(Stage::Prompting);

    let table = ConfidenceTable {
        instances: candidates
            .instances
            .par_iter()
            .zip(&cover.instances)
            .zip(&masks)
            .map(|((cands, ic), m)| {
                instance_confidence(cands, &ic.selection, &working.views, m, &superpoints, &working.points)
            })
            .collect(),
    };
    let assignment = assign_labels(&superpoints, &candidates, &table, &boxes);
    let baseline = baseline_assign(working.point_count(), &candidates, &boxes);
    timer.lap(Stage::Confidence);

    let (refined_eval, baseline_eval) = match &scene.gt_labels {
        Some(gt) => (
            Some(
                evaluate(&assignment.labels.0, gt, &superpoints, &assignment.instance_scores)
                    .map_err(stage_err(Stage::Eval))?,
            ),
            Some(evaluate(&baseline.0, gt, &superpoints, &baseline_scores(&boxes)).map_err(stage_err(Stage::Eval))?),
        ),
        None => (None, None),
    };
    timer.lap(Stage::Eval);

    let count = |labels: &LabelMap, id: i32| labels.0.iter().filter(|&&l| l == id).count();
    let instances = candidates
        .instances
        .iter()
        .zip(&cover.instances)
        .map(|(c, ic)| {
            (
                c.instance_id,
                InstanceSummary {
                    candidate_points: c.points.len(),
                    candidate_superpoints: c.superpoints.len(),
                    selected_views: ic.selection.view_ids.clone(),
                    uncovered_points: ic.selection.uncovered.len(),
                    refined_points: count(&assignment.labels, c.instance_id),
                    baseline_points: count(&baseline, c.instance_id),
                    score: assignment.instance_scores.get(&c.instance_id).copied().unwrap_or(0.0),
                },
            )
        })
        .collect();
    let report = RefineReport {
        points: working.point_count(),
        superpoints: superpoints.superpoint_count,
        instances,
        uncovered_points: cover.uncovered_count(),
        fallback_superpoints: assignment.fallback_superpoints,
        confidence_histogram: ConfidenceHistogram::from_table(&table),
        refined: refined_eval,
        baseline: baseline_eval,
    };
    let diagnostics = Diagnostics {
        stage_seconds: timer.stages,
        segment_calls: masks.iter().map(Vec::len).sum(),
        backend: String::new(),
    };
    Ok(RefineOutput {
        labels: assignment.labels,
        baseline,
        boxes,
        superpoints,
        instance_scores: assignment.instance_scores,
        view_cover: cover,
        report,
        diagnostics,
    })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(PipelineError::Config("threads must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Loads the bundle, refines it and writes outputs when an output directory
/// is configured.
pub fn run_refinement(cfg: &PipelineConfig) -> Result<RefineOutput, PipelineError> {
    cfg.refine.check()?;
    let backend = cfg.refine.resolved_backend()?;
    with_threads(cfg.threads, || {
        let start = Instant::now();
        let mut scene = load_scene_bundle(&cfg.bundle).map_err(stage_err(Stage::Load))?;
        if let Some(path) = &cfg.boxes {
            scene.boxes = read_boxes(path).map_err(stage_err(Stage::Load))?;
        }
        let load_secs = start.elapsed().as_secs_f64();
        let segmenter = make_segmenter(&scene, &backend)?;
        let mut out = refine_scene(&scene, &cfg.refine, segmenter.as_ref())?;
        out.diagnostics.stage_seconds.insert(Stage::Load.to_string(), load_secs);
        out.diagnostics.backend = match &backend {
            Backend::Oracle { .. } => "oracle".into(),
            Backend::Remote { endpoint } => format!("remote {}", endpoint.as_deref().unwrap_or("")),
        };
        if let Some(dir) = &cfg.output {
            write_outputs(dir, &out)?;
        }
        Ok(out)
    })?
}

pub fn write_outputs(dir: &Path, out: &RefineOutput) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(stage_err(Stage::Write))?;
    write_i32(&dir.join(LABELS_FILE), &out.labels.0).map_err(stage_err(Stage::Write))?;
    write_i32(&dir.join(BASELINE_FILE), &out.baseline.0).map_err(stage_err(Stage::Write))?;
    write_boxes(&dir.join(BOXES_FILE), &out.boxes).map_err(stage_err(Stage::Write))?;
    fs::write(dir.join(REPORT_FILE), stable_json(&out.report)).map_err(stage_err(Stage::Write))?;
    let diag = serde_json::to_string_pretty(&out.diagnostics).map_err(stage_err(Stage::Write))?;
    fs::write(dir.join(DIAGNOSTICS_FILE), diag + "\n").map_err(stage_err(Stage::Write))
}

/// Smallest-box labeling of a scene, without any segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutput {
    pub labels: LabelMap,
    pub boxes: Vec<InstanceBox>,
    pub report: Option<EvalReport>,
}

pub fn baseline_scene(scene: &Scene, cfg: &RefineConfig) -> Result<BaselineOutput, PipelineError> {
    cfg.check()?;
    let superpoints = match &scene.superpoints {
        Some(sp) => sp.clone(),
        None => compute_superpoints(&scene.points, scene.normals.as_deref(), &cfg.seg_params),
    };
    let boxes = match &cfg.noise {
        Some(noise) => perturb_scene_boxes(scene, noise).map_err(stage_err(Stage::BoxNoise))?,
        None => scene.boxes.clone(),
    };
    let working = Scene { superpoints: Some(superpoints.clone()), boxes: boxes.clone(), ..scene.clone() };
    let candidates = build_candidate_map(&working, &boxes).map_err(stage_err(Stage::Candidates))?;
    let labels = baseline_assign(working.point_count(), &candidates, &boxes);
    let report = match &scene.gt_labels {
        Some(gt) => {
            Some(evaluate(&labels.0, gt, &superpoints, &baseline_scores(&boxes)).map_err(stage_err(Stage::Eval))?)
        }
        None => None,
    };
    Ok(BaselineOutput { labels, boxes, report })
}

/// Baseline counterpart of [`run_refinement`]; writes `baseline.i32`,
/// `boxes.json` and, with ground truth, `report.json`.
pub fn run_baseline(cfg: &PipelineConfig) -> Result<BaselineOutput, PipelineError> {
    with_threads(cfg.threads, || {
        let mut scene = load_scene_bundle(&cfg.bundle).map_err(stage_err(Stage::Load))?;
        if let Some(path) = &cfg.boxes {
            scene.boxes = read_boxes(path).map_err(stage_err(Stage::Load))?;
        }
        let out = baseline_scene(&scene, &cfg.refine)?;
        if let Some(dir) = &cfg.output {
            fs::create_dir_all(dir).map_err(stage_err(Stage::Write))?;
            write_i32(&dir.join(BASELINE_FILE), &out.labels.0).map_err(stage_err(Stage::Write))?;
            write_boxes(&dir.join(BOXES_FILE), &out.boxes).map_err(stage_err(Stage::Write))?;
            if let Some(report) = &out.report {
                fs::write(dir.join(REPORT_FILE), stable_json(report)).map_err(stage_err(Stage::Write))?;
            }
        }
        Ok(out)
    })?
}

/// Rounds a float to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with floats rounded to six significant digits, so reports are
/// byte-stable across platforms.
pub fn stable_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("report serializes");
    round_floats(&mut v);
    serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub bundles: Vec<PathBuf>,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub modes: Vec<PromptMode>,
    /// Each seed drives both the box noise and the oracle noise.
    pub seeds: Vec<u64>,
    /// Template for every cell; its noise, beta and mode are overridden.
    pub refine: RefineConfig,
    pub threads: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            bundles: Vec::new(),
            lambdas: vec![0.0, 0.1, 0.2, 0.3],
            betas: vec![0.5],
            modes: vec![PromptMode::Merged],
            seeds: vec![0],
            refine: RefineConfig::default(),
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub wrong_points: usize,
    pub wrong_superpoints: usize,
    pub mean_iou: f64,
    pub ap25: f64,
    pub ap50: f64,
    pub map: f64,
}

impl From<&EvalReport> for MethodMetrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            wrong_points: r.wrong_points,
            wrong_superpoints: r.wrong_superpoints,
            mean_iou: r.mean_iou,
            ap25: r.ap25,
            ap50: r.ap50,
            map: r.map,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub scene: String,
    pub lambda: f64,
    pub beta: f64,
    pub mode: PromptMode,
    pub seed: u64,
    pub refined: Option<MethodMetrics>,
    pub baseline: Option<MethodMetrics>,
    pub error: Option<String>,
}

/// One scene of a sweep: a name and the scene itself.
pub struct SweepScene {
    pub name: String,
    pub scene: Scene,
}

pub fn sweep_cells(cfg: &SweepConfig) -> Vec<(f64, f64, PromptMode, u64)> {
    let mut cells = Vec::new();
    for &lambda in &cfg.lambdas {
        for &beta in &cfg.betas {
            for &mode in &cfg.modes {
                for &seed in &cfg.seeds {
                    cells.push((lambda, beta, mode, seed));
                }
            }
        }
    }
    cells
}

fn check_sweep(cfg: &SweepConfig) -> Result<(), PipelineError> {
    for (name, empty) in [
        ("lambdas", cfg.lambdas.is_empty()),
        ("betas", cfg.betas.is_empty()),
        ("modes", cfg.modes.is_empty()),
        ("seeds", cfg.seeds.is_empty()),
    ] {
        if empty {
            return Err(PipelineError::Config(format!("sweep needs at least one entry in {name}")));
        }
    }
    cfg.refine.check()
}

fn run_cell(scene: &SweepScene, cfg: &SweepConfig, backend: &Backend, cell: (f64, f64, PromptMode, u64)) -> SweepRow {
    let (lambda, beta, mode, seed) = cell;
    let mut refine = cfg.refine.clone();
    let clamp = refine.noise.is_none_or(|n| n.clamp_to_cover);
    refine.noise = Some(NoiseConfig { lambda, seed, clamp_to_cover: clamp });
    refine.segmenter.beta = beta;
    refine.segmenter.mode = mode;
    let backend = match backend {
        Backend::Oracle { noise } => Backend::Oracle { noise: OracleNoise { seed, ..*noise } },
        other => other.clone(),
    };
    let result = make_segmenter(&scene.scene, &backend).and_then(|s| refine_scene(&scene.scene, &refine, s.as_ref()));
    let (refined, baseline, error) = match result {
        Ok(out) => (
            out.report.refined.as_ref().map(MethodMetrics::from),
            out.report.baseline.as_ref().map(MethodMetrics::from),
            None,
        ),
        Err(e) => (None, None, Some(e.to_string())),
    };
    SweepRow { scene: scene.name.clone(), lambda, beta, mode, seed, refined, baseline, error }
}

/// Runs every (scene, lambda, beta, mode, seed) cell. Cell failures are
/// recorded in their row and do not stop the sweep.
pub fn run_sweep_scenes(scenes: &[SweepScene], cfg: &SweepConfig) -> Result<Vec<SweepRow>, PipelineError> {
    check_sweep(cfg)?;
    let backend = cfg.refine.resolved_backend()?;
    let cells = sweep_cells(cfg);
    with_threads(cfg.threads, || {
        let jobs: Vec<(usize, (f64, f64, PromptMode, u64))> =
            (0..scenes.len()).flat_map(|s| cells.iter().map(move |&c| (s, c))).collect();
        jobs.par_iter().map(|&(s, cell)| run_cell(&scenes[s], cfg, &backend, cell)).collect()
    })
}

/// Loads every bundle (computing missing superpoints once) and sweeps.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>, PipelineError> {
    check_sweep(cfg)?;
    if cfg.bundles.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one bundle".into()));
    }
    let scenes = with_threads(cfg.threads, || {
        cfg.bundles
            .par_iter()
            .map(|path| {
                let mut scene = load_scene_bundle(path).map_err(stage_err(Stage::Load))?;
                ensure_superpoints(&mut scene, &cfg.refine.seg_params);
                let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into());
                Ok(SweepScene { name, scene })
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })??;
    run_sweep_scenes(&scenes, cfg)
}

pub const SWEEP_CSV_HEADER: &str =
    "scene,lambda,beta,mode,seed,method,wrong_points,wrong_superpoints,mean_iou,ap25,ap50,map,error";

/// One line per (row, method), floats at six significant digits.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    let mode_name = |m: PromptMode| match m {
        PromptMode::Merged => "MERGED",
        PromptMode::SingleCombined => "SINGLE_COMBINED",
    };
    for r in rows {
        for (method, metrics) in [("refined", &r.refined), ("baseline", &r.baseline)] {
            let cols = match metrics {
                Some(m) => format!(
                    "{},{},{},{},{},{}",
                    m.wrong_points,
                    m.wrong_superpoints,
                    round_sig6(m.mean_iou),
                    round_sig6(m.ap25),
                    round_sig6(m.ap50),
                    round_sig6(m.map)
                ),
                None => ",,,,,".to_string(),
            };
            let error = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out.push_str(&format!(
                "{},{},{},{},{},{method},{cols},{error}\n",
                r.scene,
                round_sig6(r.lambda),
                round_sig6(r.beta),
                mode_name(r.mode),
                r.seed
            ));
        }
    }
    out
}

/// Writes `sweep.csv` and `sweep.json` into `dir`.
pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(stage_err(Stage::Write))?;
    fs::write(dir.join("sweep.csv"), sweep_csv(rows)).map_err(stage_err(Stage::Write))?;
    fs::write(dir.join("sweep.json"), stable_json(&rows)).map_err(stage_err(Stage::Write))
}
