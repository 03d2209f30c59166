//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use boxrefine::camera::{project_point, visible, CameraView, DepthImage, VisibilityTolerance};
use boxrefine::confidence::point_confidence;
use boxrefine::pipeline::*;
use boxrefine::prompting::*;
use boxrefine::scene::{InstanceBox, Point3, Scene, SuperpointPartition, BACKGROUND};
use boxrefine::superpoints::{compute_superpoints, fh_segment, Edge, PointGraph, SegParams};
use boxrefine::synth::{generate_scene, SynthConfig};
use boxrefine::view_select::greedy_cover;
use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SUITE_SIZE: u64 = 20;
const NOISY_LAMBDAS: [f64; 3] = [0.1, 0.2, 0.3];

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() {
    let suite = build_suite();
    let noisy = noisy_rows(&suite);
    let criteria: Vec<Criterion> = vec![
        ("end-to-end exactness", Box::new(|| exactness(&suite))),
        ("refinement beats baseline", Box::new(|| beats_baseline(&noisy))),
        ("noise robustness trend", Box::new(|| robustness_trend(&noisy))),
        ("formula conformance", Box::new(formula_conformance)),
        ("greedy cover properties", Box::new(greedy_properties)),
        ("determinism", Box::new(|| determinism(&suite))),
        ("beta and prompt-mode harness", Box::new(|| beta_mode_harness(&suite))),
        ("invariant suites", Box::new(invariant_suites)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!("criterion {} {name}: {} ({})", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

/// Twenty default synthetic scenes with superpoints precomputed.
fn build_suite() -> Vec<SweepScene> {
    (0..SUITE_SIZE)
        .into_par_iter()
        .map(|seed| {
            let mut scene = generate_scene(&SynthConfig { seed, ..SynthConfig::default() }).expect("suite scene");
            ensure_superpoints(&mut scene, &SegParams::default());
            SweepScene { name: format!("scene_{seed:03}"), scene }
        })
        .collect()
}

fn impure_superpoints(scene: &Scene) -> usize {
    let gt = scene.gt_labels.as_ref().expect("synthetic gt");
    let partition = scene.superpoints.as_ref().expect("superpoints");
    partition.members().iter().filter(|m| m.iter().any(|&i| gt[i] != gt[m[0]])).count()
}

fn exactness(suite: &[SweepScene]) -> Verdict {
    let cfg = RefineConfig { noise: Some(boxrefine::box_noise::NoiseConfig::new(0.3, 0)), ..RefineConfig::default() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let mut failures = Vec::new();
    let mut slowest = 0.0f64;
    let mut min_points = usize::MAX;
    let mut min_objects = usize::MAX;
    for s in suite {
        let scene = &s.scene;
        min_points = min_points.min(scene.point_count());
        min_objects = min_objects.min(scene.boxes.len());
        if scene.views.len() != 12 {
            failures.push(format!("{} has {} views", s.name, scene.views.len()));
        }
        let impure = impure_superpoints(scene);
        if impure > 0 {
            failures.push(format!("{} has {impure} impure superpoints", s.name));
        }
        let start = Instant::now();
        let out = pool.install(|| {
            let oracle = OracleSegmenter::new(scene, OracleNoise::default()).expect("oracle");
            refine_scene(scene, &cfg, &oracle).expect("refine")
        });
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let wrong = out.report.refined.as_ref().expect("gt available").wrong_points;
        if wrong > 0 {
            failures.push(format!("{}: {wrong} wrong points", s.name));
        }
    }
    let ok = failures.is_empty() && min_points >= 2000 && min_objects >= 3 && slowest < 10.0;
    verdict(
        ok,
        format!(
            "{} scenes, >= {min_points} points, >= {min_objects} objects, slowest single-threaded run {slowest:.2} s{}",
            suite.len(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn noisy_backend() -> Backend {
    Backend::Oracle { noise: noisy_oracle(0) }
}

/// Noisy-oracle sweep over the suite at lambda 0, 0.1, 0.2, 0.3.
fn noisy_rows(suite: &[SweepScene]) -> Vec<SweepRow> {
    let cfg = SweepConfig {
        lambdas: vec![0.0, 0.1, 0.2, 0.3],
        seeds: vec![17],
        refine: RefineConfig { backend: Some(noisy_backend()), ..RefineConfig::default() },
        ..SweepConfig::default()
    };
    run_sweep_scenes(suite, &cfg).expect("noisy sweep")
}

fn wrong(m: &Option<MethodMetrics>) -> usize {
    m.as_ref().expect("cell metrics").wrong_points
}

fn beats_baseline(rows: &[SweepRow]) -> Verdict {
    let cells: Vec<&SweepRow> = rows.iter().filter(|r| NOISY_LAMBDAS.contains(&r.lambda)).collect();
    if let Some(r) = cells.iter().find(|r| r.error.is_some()) {
        return verdict(false, format!("cell {} lambda {} failed: {:?}", r.scene, r.lambda, r.error));
    }
    let wins = cells.iter().filter(|r| wrong(&r.refined) < wrong(&r.baseline)).count();
    let mut reductions: Vec<f64> = cells
        .iter()
        .map(|r| {
            let b = wrong(&r.baseline) as f64;
            if b == 0.0 {
                0.0
            } else {
                (b - wrong(&r.refined) as f64) / b
            }
        })
        .collect();
    reductions.sort_by(f64::total_cmp);
    let n = reductions.len();
    let median = if n % 2 == 1 { reductions[n / 2] } else { (reductions[n / 2 - 1] + reductions[n / 2]) / 2.0 };
    let share = wins as f64 / n as f64;
    verdict(
        share >= 0.9 && median > 0.3,
        format!("refined better in {wins}/{n} cells ({:.1}%), median reduction {:.1}%", share * 100.0, median * 100.0),
    )
}

fn robustness_trend(rows: &[SweepRow]) -> Verdict {
    let mut by_lambda: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in rows {
        let e = by_lambda.entry((r.lambda * 1000.0).round() as u64).or_default();
        e.0 += wrong(&r.refined);
        e.1 += 1;
    }
    let means: Vec<f64> = by_lambda.values().map(|&(sum, n)| sum as f64 / n as f64).collect();
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    let text: Vec<String> =
        by_lambda.keys().zip(&means).map(|(l, m)| format!("lambda {}: {m:.2}", *l as f64 / 1000.0)).collect();
    verdict(monotone && means.len() == 4, format!("suite mean refined wrong points {}", text.join(", ")))
}

fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32) -> ScoreMask {
    let mut m = ScoreMask::filled(w, h, 0.0);
    for s in &mut m.scores {
        // exact 0 and 1 are common in real masks
        *s = match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random(),
        };
    }
    m
}

fn brute_merge(fg: &ScoreMask, bgs: &[ScoreMask], beta: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..fg.height {
        for x in 0..fg.width {
            let mut strongest = 0.0f64;
            for bg in bgs {
                strongest = strongest.max(bg.at(x, y) as f64);
            }
            let merged = if bgs.is_empty() { fg.at(x, y) as f64 } else { fg.at(x, y) as f64 - beta * strongest };
            out.push(merged);
        }
    }
    out
}

/// A camera at a random pose looking roughly down +z of its own frame.
fn random_view(rng: &mut ChaCha8Rng, id: u32) -> CameraView {
    let (w, h) = (rng.random_range(8..48u32), rng.random_range(8..48u32));
    let f = rng.random_range(10.0..60.0);
    let k = Matrix3::new(f, 0.0, w as f64 / 2.0, 0.0, f, h as f64 / 2.0, 0.0, 0.0, 1.0);
    let r = Rotation3::from_euler_angles(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-3.1..3.1),
    );
    let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let mut e = Matrix3x4::zeros();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    e.set_column(3, &t);
    let depth = vec![0.0f32; (w * h) as usize];
    CameraView::new(id, k, e, DepthImage::from_meters(w, h, 0.2, &depth))
}

/// Explicit-loop projection: pixel coordinates and camera depth.
fn brute_project(p: &Point3, view: &CameraView) -> (f64, f64, f64) {
    let e = view.extrinsics();
    let k = view.intrinsics();
    let xyz1 = [p.x, p.y, p.z, 1.0];
    let mut cam = [0.0; 3];
    for (i, c) in cam.iter_mut().enumerate() {
        for (j, v) in xyz1.iter().enumerate() {
            *c += e[(i, j)] * v;
        }
    }
    let mut img = [0.0; 3];
    for (i, c) in img.iter_mut().enumerate() {
        for (j, v) in cam.iter().enumerate() {
            *c += k[(i, j)] * v;
        }
    }
    (img[0] / img[2], img[1] / img[2], img[2])
}

fn brute_confidence(p: &Point3, views: &[CameraView], masks: &[ScoreMask], tol: &VisibilityTolerance) -> Option<f64> {
    let mut sum = 0.0;
    let mut seen = 0;
    for (view, mask) in views.iter().zip(masks) {
        let (u, v, z) = brute_project(p, view);
        let (x, y) = (u.round_ties_even(), v.round_ties_even());
        if z <= 0.0 || u < 0.0 || v < 0.0 || x < 0.0 || y < 0.0 || x >= view.width() as f64 || y >= view.height() as f64
        {
            continue;
        }
        let (x, y) = (x as u32, y as u32);
        let Some(d) = view.depth().meters_at(x, y) else { continue };
        if (d - z).abs() <= tol.abs_m.max(tol.rel * z) {
            sum += mask.at(x, y) as f64;
            seen += 1;
        }
    }
    (seen > 0).then(|| sum / seen as f64)
}

fn formula_conformance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut merge_err = 0.0f64;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..12u32), rng.random_range(1..12u32));
        let fg = random_mask(&mut rng, w, h);
        let bgs: Vec<ScoreMask> = (0..rng.random_range(0..5)).map(|_| random_mask(&mut rng, w, h)).collect();
        let beta = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.5) };
        let got = merge_masks(&fg, &bgs, beta).expect("same dims");
        for (g, b) in got.scores.iter().zip(brute_merge(&fg, &bgs, beta)) {
            merge_err = merge_err.max((*g as f64 - b).abs());
        }
    }

    let tol = VisibilityTolerance::default();
    let mut conf_err = 0.0f64;
    let mut mismatched = 0;
    let mut observed = 0;
    for _ in 0..1000 {
        let mut views: Vec<CameraView> = (0..rng.random_range(1..6)).map(|i| random_view(&mut rng, i)).collect();
        let p = Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.3..4.0));
        // write a depth at the point's pixel that agrees, disagrees or is a hole
        for view in &mut views {
            let proj = project_point(&p, view);
            let Some((x, y)) = proj.pixel() else { continue };
            let (w, h) = (view.width(), view.height());
            let offset = [0.0, 0.005, -0.01, 0.3, -0.4][rng.random_range(0..5)];
            let mut meters = vec![0.0f32; (w * h) as usize];
            if !rng.random_bool(0.1) {
                meters[(y * w + x) as usize] = (proj.cam_depth + offset).max(0.0) as f32;
            }
            let depth = DepthImage::from_meters(w, h, 0.2, &meters);
            *view = view.clone().with_depth(depth);
        }
        let masks: Vec<ScoreMask> = views.iter().map(|v| random_mask(&mut rng, v.width(), v.height())).collect();
        let view_refs: Vec<&CameraView> = views.iter().collect();
        let mask_refs: Vec<&ScoreMask> = masks.iter().collect();
        let got = point_confidence(&p, &view_refs, &mask_refs, &tol);
        match (got, brute_confidence(&p, &views, &masks, &tol)) {
            (Some(a), Some(b)) => {
                observed += 1;
                conf_err = conf_err.max((a - b).abs());
            }
            (None, None) => {}
            _ => mismatched += 1,
        }
    }
    verdict(
        merge_err <= 1e-6 && conf_err <= 1e-6 && mismatched == 0 && observed > 100,
        format!(
            "merge max error {merge_err:.1e} over 1000 cases; confidence max error {conf_err:.1e}, \
             {observed} observed, {mismatched} observation mismatches over 1000 cases"
        ),
    )
}

fn greedy_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();
    let mut worst_ratio = 0.0f64;
    for case in 0..200 {
        let views = rng.random_range(1..=10usize);
        let points = rng.random_range(1..=50usize);
        let density = rng.random_range(0.02..0.5);
        let sets: Vec<Vec<u32>> =
            (0..views).map(|_| (0..points as u32).filter(|_| rng.random_bool(density)).collect()).collect();
        let keys: Vec<u32> = (0..views as u32).collect();
        let cover = greedy_cover(points, &sets, &keys, None);

        let masks: Vec<u64> = sets.iter().map(|s| s.iter().fold(0u64, |m, &e| m | 1 << e)).collect();
        let coverable = masks.iter().fold(0u64, |a, &m| a | m);
        let uncovered = cover.uncovered.iter().fold(0u64, |m, &e| m | 1 << e);
        if uncovered & coverable != 0 {
            problems.push(format!("case {case}: coverable points left uncovered"));
        }
        if cover.gains.windows(2).any(|g| g[0] < g[1]) {
            problems.push(format!("case {case}: gains increase {:?}", cover.gains));
        }
        let optimum = (0u32..1 << views)
            .filter(|subset| (0..views).filter(|v| subset >> v & 1 == 1).fold(0u64, |a, v| a | masks[v]) == coverable)
            .map(|subset| subset.count_ones() as usize)
            .min()
            .expect("the full family covers");
        let n = coverable.count_ones() as f64;
        let bound = if n == 0.0 { 0.0 } else { (1.0 + n.ln()) * optimum as f64 };
        if cover.order.len() as f64 > bound + 1e-9 {
            problems.push(format!("case {case}: {} sets vs optimum {optimum}", cover.order.len()));
        }
        if optimum > 0 {
            worst_ratio = worst_ratio.max(cover.order.len() as f64 / optimum as f64);
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("200 matrices, worst greedy/optimum ratio {worst_ratio:.2}")
        } else {
            problems.join("; ")
        },
    )
}

fn read_all(dir: &std::path::Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap_or_else(|e| panic!("{n}: {e}"))).collect()
}

fn determinism(suite: &[SweepScene]) -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let bundle = tmp.path().join("scene");
    boxrefine::bundle::save_scene_bundle(&suite[0].scene, &bundle).expect("save bundle");

    let refine_files = [LABELS_FILE, BASELINE_FILE, REPORT_FILE, BOXES_FILE];
    let mut refine_runs = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("refine{run}"));
        let cfg = PipelineConfig {
            bundle: bundle.clone(),
            refine: RefineConfig {
                noise: Some(boxrefine::box_noise::NoiseConfig::new(0.2, 3)),
                backend: Some(noisy_backend()),
                ..RefineConfig::default()
            },
            output: Some(out_dir.clone()),
            ..PipelineConfig::default()
        };
        run_refinement(&cfg).expect("refine");
        refine_runs.push(read_all(&out_dir, &refine_files));
    }

    let mut sweep_runs = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("sweep{run}"));
        let cfg = SweepConfig {
            bundles: vec![bundle.clone()],
            lambdas: vec![0.1, 0.3],
            betas: vec![0.2, 0.8],
            modes: vec![PromptMode::Merged, PromptMode::SingleCombined],
            seeds: vec![1, 2],
            refine: RefineConfig { backend: Some(noisy_backend()), ..RefineConfig::default() },
            threads: None,
        };
        let rows = run_sweep(&cfg).expect("sweep");
        write_sweep(&out_dir, &rows).expect("write sweep");
        sweep_runs.push(read_all(&out_dir, &["sweep.csv", "sweep.json"]));
    }
    let refine_same = refine_runs[0] == refine_runs[1];
    let sweep_same = sweep_runs[0] == sweep_runs[1];
    verdict(
        refine_same && sweep_same,
        format!("refine outputs identical: {refine_same}; sweep outputs identical: {sweep_same}"),
    )
}

/// Wraps the oracle and bleeds a weak score over every pixel of a box
/// prompt, as a segmenter that leaks into the background would.
struct LeakySegmenter {
    inner: OracleSegmenter,
    leak: f32,
}

impl Segmenter for LeakySegmenter {
    fn segment(&self, view: &CameraView, prompt: &Prompt) -> Result<ScoreMask, SegmentError> {
        let mut mask = self.inner.segment(view, prompt)?;
        if let Prompt::ForegroundBox { x_min, y_min, x_max, y_max } = *prompt {
            for y in y_min..=y_max {
                for x in x_min..=x_max {
                    let i = (y * mask.width + x) as usize;
                    mask.scores[i] = mask.scores[i].max(self.leak);
                }
            }
        }
        Ok(mask)
    }

    fn segment_combined(
        &self,
        view: &CameraView,
        fg: &Prompt,
        negatives: &[Prompt],
    ) -> Result<ScoreMask, SegmentError> {
        let mut out = self.segment(view, fg)?;
        let bgs = negatives.iter().map(|p| self.segment(view, p)).collect::<Result<Vec<_>, _>>()?;
        for (i, s) in out.scores.iter_mut().enumerate() {
            let bg = bgs.iter().map(|m| m.scores[i]).fold(0.0f32, f32::max);
            *s = (*s - bg).clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Background superpoints entirely inside `bx`.
fn background_superpoints_in(scene: &Scene, bx: &InstanceBox) -> Vec<Vec<usize>> {
    let gt = scene.gt_labels.as_ref().expect("gt");
    let partition = scene.superpoints.as_ref().expect("superpoints");
    partition
        .members()
        .into_iter()
        .filter(|m| m.iter().all(|&i| gt[i] == BACKGROUND && bx.contains(&scene.points[i])))
        .collect()
}

/// Leakage fixture: the first box is enlarged well past its object so that
/// whole floor superpoints fall inside it, and the segmenter leaks into them.
fn leakage_fixture(suite: &[SweepScene]) -> Result<String, String> {
    let mut scene = suite[0].scene.clone();
    let grow = Point3::new(0.3, 0.3, 0.05);
    let bx = &mut scene.boxes[0];
    bx.c_min = Point3::new(bx.c_min.x - grow.x, bx.c_min.y - grow.y, bx.c_min.z - grow.z);
    bx.c_max = Point3::new(bx.c_max.x + grow.x, bx.c_max.y + grow.y, bx.c_max.z + grow.z);
    let enlarged = *bx;
    let leaked = background_superpoints_in(&scene, &enlarged);
    if leaked.is_empty() {
        return Err("fixture has no background superpoint inside the enlarged box".into());
    }
    let segmenter =
        LeakySegmenter { inner: OracleSegmenter::new(&scene, OracleNoise::default()).expect("oracle"), leak: 0.4 };
    let labeled_bg = |beta: f64| -> Result<usize, String> {
        let cfg = RefineConfig {
            segmenter: SegmenterConfig { mode: PromptMode::Merged, beta, ..SegmenterConfig::default() },
            ..RefineConfig::default()
        };
        let out = refine_scene(&scene, &cfg, &segmenter).map_err(|e| e.to_string())?;
        Ok(leaked.iter().filter(|m| m.iter().all(|&i| out.labels.0[i] == BACKGROUND)).count())
    };
    let with_beta = labeled_bg(0.5)?;
    let without = labeled_bg(0.0)?;
    let detail = format!(
        "{} leaked superpoints: {with_beta} background at beta 0.5, {without} background at beta 0",
        leaked.len()
    );
    if with_beta == leaked.len() && without < leaked.len() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn beta_mode_harness(suite: &[SweepScene]) -> Verdict {
    let cfg = SweepConfig {
        lambdas: vec![0.2],
        betas: vec![0.2, 0.5, 0.8],
        modes: vec![PromptMode::Merged, PromptMode::SingleCombined],
        seeds: vec![9],
        refine: RefineConfig { backend: Some(noisy_backend()), ..RefineConfig::default() },
        ..SweepConfig::default()
    };
    let scenes = &suite[..4];
    let rows = run_sweep_scenes(scenes, &cfg).expect("beta sweep");
    let csv = sweep_csv(&rows);
    let complete = rows.len() == 4 * 6
        && rows.iter().all(|r| r.error.is_none() && r.refined.is_some())
        && csv.lines().next() == Some(SWEEP_CSV_HEADER)
        && csv.lines().count() == 1 + 2 * rows.len();
    let mut table: BTreeMap<(String, u64), (f64, f64)> = BTreeMap::new();
    for r in &rows {
        let key = (format!("{:?}", r.mode), (r.beta * 10.0).round() as u64);
        let m = r.refined.as_ref().map_or((0.0, 0.0), |m| (m.wrong_points as f64, m.ap50));
        let e = table.entry(key).or_default();
        e.0 += m.0 / scenes.len() as f64;
        e.1 += m.1 / scenes.len() as f64;
    }
    let summary: Vec<String> = table
        .iter()
        .map(|((mode, b), (w, ap))| format!("{mode} beta {:.1}: wrong {w:.1} ap50 {ap:.3}", *b as f64 / 10.0))
        .collect();
    let leak = leakage_fixture(suite);
    let pass = complete && leak.is_ok();
    verdict(pass, format!("{}; {}", summary.join(", "), leak.unwrap_or_else(|e| e)))
}

fn small_scene(seed: u64) -> Scene {
    let cfg = SynthConfig {
        seed,
        object_count: 3,
        points_per_m2: 150.0,
        view_count: 4,
        image_width: 96,
        image_height: 72,
        focal_px: 75.0,
        ..SynthConfig::default()
    };
    let mut scene = generate_scene(&cfg).expect("small scene");
    ensure_superpoints(&mut scene, &SegParams::default());
    scene
}

fn random_graph() -> impl Strategy<Value = PointGraph> {
    (2usize..40).prop_flat_map(|n| {
        let edge = (0..n as u32, 0..n as u32, prop_oneof![Just(0.0), 0.0f64..1.0]);
        proptest::collection::vec(edge, 0..120).prop_map(move |raw| {
            let mut seen = BTreeMap::new();
            for (a, b, w) in raw {
                if a != b {
                    seen.entry((a.min(b), a.max(b))).or_insert(w);
                }
            }
            PointGraph {
                node_count: n,
                edges: seen.into_iter().map(|((a, b), weight)| Edge { a, b, weight }).collect(),
            }
        })
    })
}

fn labels_constant_on(partition: &SuperpointPartition, labels: &[i32]) -> bool {
    partition.members().iter().all(|m| m.iter().all(|&i| labels[i] == labels[m[0]]))
}

fn invariant_suites() -> Verdict {
    let mut results = Vec::new();
    let mut run = |name: &str, cases: u32, outcome: &mut dyn FnMut(&mut TestRunner) -> Result<(), String>| {
        let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
        results.push((name.to_string(), outcome(&mut runner)));
    };

    run("label map", 12, &mut |runner| {
        runner
            .run(&(0u64..1000, 0.0f64..0.5, 0.0f64..1.0, any::<bool>()), |(seed, lambda, beta, combined)| {
                let scene = small_scene(seed);
                let cfg = RefineConfig {
                    noise: Some(boxrefine::box_noise::NoiseConfig::new(lambda, seed)),
                    segmenter: SegmenterConfig {
                        beta,
                        mode: if combined { PromptMode::SingleCombined } else { PromptMode::Merged },
                        ..SegmenterConfig::default()
                    },
                    ..RefineConfig::default()
                };
                let oracle = OracleSegmenter::new(&scene, noisy_oracle(seed)).expect("oracle");
                let out = refine_scene(&scene, &cfg, &oracle).expect("refine");
                let ids: Vec<i32> = scene.boxes.iter().map(|b| b.instance_id).collect();
                // one label per point, each the background or a box's instance
                prop_assert_eq!(out.labels.len(), scene.point_count());
                prop_assert_eq!(out.baseline.len(), scene.point_count());
                for &l in out.labels.as_slice().iter().chain(out.baseline.as_slice()) {
                    prop_assert!(l == BACKGROUND || ids.contains(&l));
                }
                let partition = scene.superpoints.as_ref().expect("superpoints");
                prop_assert!(labels_constant_on(partition, out.labels.as_slice()));
                prop_assert!(labels_constant_on(partition, out.baseline.as_slice()));
                Ok(())
            })
            .map_err(|e| e.to_string())
    });

    run("partition", 64, &mut |runner| {
        let cloud = proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 0..200);
        runner
            .run(&(cloud, 1usize..12, 0.001f64..1.0, 1usize..30), |(raw, knn, k, min_size)| {
                let points: Vec<Point3> = raw.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
                let part = compute_superpoints(&points, None, &SegParams { knn, threshold_k: k, min_size });
                prop_assert_eq!(part.len(), points.len());
                prop_assert!(part.check().is_none());
                Ok(())
            })
            .map_err(|e| e.to_string())
    });

    run("zero-weight merging", 256, &mut |runner| {
        runner
            .run(&(random_graph(), 0.001f64..2.0, 1usize..8), |(g, k, min_size)| {
                let part = fh_segment(&g, &SegParams { knn: 4, threshold_k: k, min_size });
                for e in g.edges.iter().filter(|e| e.weight == 0.0) {
                    prop_assert_eq!(part.assignment[e.a as usize], part.assignment[e.b as usize]);
                }
                Ok(())
            })
            .map_err(|e| e.to_string())
    });

    let point = || (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0);
    run("projection linearity", 256, &mut |runner| {
        runner
            .run(&(any::<u64>(), point(), point(), -2.0f64..2.0), |(seed, a, b, t)| {
                let view = random_view(&mut ChaCha8Rng::seed_from_u64(seed), 0);
                let (pa, pb) = (Point3::new(a.0, a.1, a.2), Point3::new(b.0, b.1, b.2));
                let mix = Point3::new(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), a.2 + t * (b.2 - a.2));
                // homogeneous image coordinates are affine in the world point
                let hom = |p: &Point3| {
                    let q = project_point(p, &view);
                    [q.pixel_x * q.cam_depth, q.pixel_y * q.cam_depth, q.cam_depth]
                };
                let (ha, hb, hm) = (hom(&pa), hom(&pb), hom(&mix));
                for i in 0..3 {
                    let expected = ha[i] + t * (hb[i] - ha[i]);
                    prop_assert!((hm[i] - expected).abs() <= 1e-6 * (1.0 + expected.abs()), "{:?} vs {}", hm, expected);
                }
                Ok(())
            })
            .map_err(|e| e.to_string())
    });

    run("visibility implies in frame", 256, &mut |runner| {
        runner
            .run(&(any::<u64>(), point(), 0.0f32..8.0), |(seed, p, fill)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let view = random_view(&mut rng, 0);
                let (w, h) = (view.width(), view.height());
                let depth = DepthImage::from_meters(w, h, 0.2, &vec![fill; (w * h) as usize]);
                let view = view.with_depth(depth);
                let p = Point3::new(p.0, p.1, p.2);
                if visible(&p, &view, &VisibilityTolerance { abs_m: 0.5, rel: 0.1 }) {
                    let proj = project_point(&p, &view);
                    prop_assert!(proj.in_frame && proj.pixel().is_some());
                }
                Ok(())
            })
            .map_err(|e| e.to_string())
    });

    let failures: Vec<String> =
        results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let names: Vec<&str> = results.iter().map(|(n, _)| n.as_str()).collect();
    verdict(
        failures.is_empty(),
        if failures.is_empty() { format!("held: {}", names.join(", ")) } else { failures.join("; ") },
    )
}

fn noisy_oracle(seed: u64) -> OracleNoise {
    OracleNoise { erode_px: 1, dilate_px: 0, jitter: 0.1, mislabel: 0.05, seed }
}
