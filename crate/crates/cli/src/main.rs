use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxrefine::box_noise::{perturb_scene_boxes, NoiseConfig};
use boxrefine::bundle::{load_scene_bundle, read_i32, save_scene_bundle, write_boxes};
use boxrefine::eval::evaluate;
use boxrefine::pipeline::*;
use boxrefine::prompting::PromptMode;
use boxrefine::superpoints::{compute_superpoints, SegParams};
use boxrefine::synth::{generate_scene, generate_suite, SynthConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Stage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(msg) => CliError::Config(msg),
            other => CliError::Stage(other.to_string()),
        }
    }
}

fn stage<E: std::fmt::Display>(what: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Stage(format!("{what}: {e}"))
}

#[derive(Parser)]
#[command(name = "boxrefine", version, about = "Refine noisy 3D instance boxes into point-wise labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle, or a suite of them with --count.
    Synth(SynthArgs),
    /// Compute superpoints for a bundle and store them in it.
    Superpoints(SuperpointArgs),
    /// Write perturbed versions of a bundle's boxes.
    PerturbBoxes(PerturbArgs),
    /// Run the full refinement pipeline on a bundle.
    Refine(RunArgs),
    /// Label a bundle with the smallest-box baseline.
    Baseline(RunArgs),
    /// Score a label file against a bundle's ground truth.
    Eval(EvalArgs),
    /// Run the pipeline over a grid of lambda, beta, mode and seed.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic-scene config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    points_per_m2: Option<f64>,
    /// Spread objects over the room instead of clustering them.
    #[arg(long)]
    no_occlusion: bool,
    /// Write this many scenes with consecutive seeds to <out>/scene_NNN.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuperpointArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    knn: Option<usize>,
    /// Felzenszwalb threshold constant.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    min_size: Option<usize>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep perturbed boxes even when they no longer cover the object.
    #[arg(long)]
    no_clamp: bool,
    /// Output boxes JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "SCREAMING_SNAKE_CASE")]
enum ModeArg {
    Merged,
    SingleCombined,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Merged => PromptMode::Merged,
            ModeArg::SingleCombined => PromptMode::SingleCombined,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Oracle,
    Remote,
}

#[derive(Args)]
struct RunArgs {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Boxes JSON replacing the bundle's boxes.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Perturb the boxes with this noise level before refining.
    #[arg(long)]
    lambda: Option<f64>,
    /// Box-noise seed (used with --lambda).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_clamp: bool,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum, ignore_case = true)]
    mode: Option<ModeArg>,
    /// Background prompt window, pixels.
    #[arg(long)]
    window: Option<u32>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Segmentation service URL for the remote backend.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    max_views: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted labels (.i32).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Instance scores for AP ranking: a JSON object of id to score, or a
    /// refine report. Without it every instance scores 1.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene bundle; repeat for several.
    #[arg(long = "bundle")]
    bundles: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_enum, ignore_case = true)]
    modes: Option<Vec<ModeArg>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory for sweep.csv and sweep.json.
    #[arg(long)]
    out: PathBuf,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!("bundle {} does not exist", path.display())))
    }
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.objects {
        cfg.object_count = v;
    }
    if let Some(v) = args.views {
        cfg.view_count = v;
    }
    if let Some(v) = args.points_per_m2 {
        cfg.points_per_m2 = v;
    }
    if args.no_occlusion {
        cfg.occlusion = false;
    }
    cfg.check().map_err(|e| CliError::Config(e.to_string()))?;
    match args.count {
        Some(count) => {
            if count == 0 {
                return Err(CliError::Config("--count must be >= 1".into()));
            }
            for dir in generate_suite(count, &cfg, cfg.seed, &args.out).map_err(stage("synth"))? {
                println!("{}", dir.display());
            }
        }
        None => {
            let scene = generate_scene(&cfg).map_err(stage("synth"))?;
            save_scene_bundle(&scene, &args.out).map_err(stage("write"))?;
            println!("{}", args.out.display());
        }
    }
    Ok(())
}

fn superpoints(args: SuperpointArgs) -> Result<(), CliError> {
    require_dir(&args.bundle)?;
    let mut params = SegParams::default();
    if let Some(v) = args.knn {
        params.knn = v;
    }
    if let Some(v) = args.k {
        params.threshold_k = v;
    }
    if let Some(v) = args.min_size {
        params.min_size = v;
    }
    if params.knn == 0 || !(params.threshold_k >= 0.0) {
        return Err(CliError::Config("knn must be >= 1 and k >= 0".into()));
    }
    let mut scene = load_scene_bundle(&args.bundle).map_err(stage("load"))?;
    let partition = compute_superpoints(&scene.points, scene.normals.as_deref(), &params);
    println!("{} superpoints over {} points", partition.superpoint_count, partition.len());
    scene.superpoints = Some(partition);
    save_scene_bundle(&scene, &args.bundle).map_err(stage("write"))
}

fn perturb(args: PerturbArgs) -> Result<(), CliError> {
    require_dir(&args.bundle)?;
    let noise = NoiseConfig { lambda: args.lambda, seed: args.seed, clamp_to_cover: !args.no_clamp };
    noise.check().map_err(|e| CliError::Config(e.to_string()))?;
    let scene = load_scene_bundle(&args.bundle).map_err(stage("load"))?;
    let boxes = perturb_scene_boxes(&scene, &noise).map_err(stage("box-noise"))?;
    write_boxes(&args.out, &boxes).map_err(stage("write"))
}

fn pipeline_config(args: RunArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg: PipelineConfig = read_config(args.config.as_deref())?;
    if let Some(v) = args.bundle {
        cfg.bundle = v;
    }
    if let Some(v) = args.boxes {
        cfg.boxes = Some(v);
    }
    if args.lambda.is_some() || args.seed.is_some() || args.no_clamp {
        let mut noise = cfg.refine.noise.unwrap_or(NoiseConfig::new(0.0, 0));
        if let Some(v) = args.lambda {
            noise.lambda = v;
        }
        if let Some(v) = args.seed {
            noise.seed = v;
        }
        if args.no_clamp {
            noise.clamp_to_cover = false;
        }
        cfg.refine.noise = Some(noise);
    }
    if let Some(v) = args.beta {
        cfg.refine.segmenter.beta = v;
    }
    if let Some(v) = args.mode {
        cfg.refine.segmenter.mode = v.into();
    }
    if let Some(v) = args.window {
        cfg.refine.segmenter.window = v;
    }
    match (args.backend, args.endpoint) {
        (Some(BackendArg::Oracle), Some(_)) => {
            return Err(CliError::Config("--endpoint needs the remote backend".into()));
        }
        (Some(BackendArg::Oracle), None) => {
            if !matches!(cfg.refine.backend, Some(Backend::Oracle { .. })) {
                cfg.refine.backend = Some(Backend::default());
            }
        }
        (Some(BackendArg::Remote), endpoint) | (None, endpoint @ Some(_)) => {
            cfg.refine.backend = Some(Backend::Remote { endpoint });
        }
        (None, None) => {}
    }
    if let Some(v) = args.max_views {
        cfg.refine.max_views = Some(v);
    }
    if let Some(v) = args.threads {
        cfg.threads = Some(v);
    }
    if let Some(v) = args.out {
        cfg.output = Some(v);
    }
    if cfg.bundle.as_os_str().is_empty() {
        return Err(CliError::Config("no bundle given".into()));
    }
    require_dir(&cfg.bundle)?;
    if let Some(b) = &cfg.boxes {
        if !b.is_file() {
            return Err(CliError::Config(format!("boxes file {} does not exist", b.display())));
        }
    }
    Ok(cfg)
}

fn refine(args: RunArgs) -> Result<(), CliError> {
    let cfg = pipeline_config(args)?;
    let out = run_refinement(&cfg)?;
    for (stage, secs) in &out.diagnostics.stage_seconds {
        log::info!("{stage}: {secs:.3} s");
    }
    match (&cfg.output, &out.report.refined, &out.report.baseline) {
        (None, _, _) => print!("{}", stable_json(&out.report)),
        (Some(dir), Some(r), Some(b)) => println!(
            "wrote {}: refined wrong_points {} mAP {:.4}; baseline wrong_points {} mAP {:.4}",
            dir.display(),
            r.wrong_points,
            r.map,
            b.wrong_points,
            b.map
        ),
        (Some(dir), _, _) => println!("wrote {}", dir.display()),
    }
    Ok(())
}

fn baseline(args: RunArgs) -> Result<(), CliError> {
    if args.backend.is_some() || args.endpoint.is_some() {
        return Err(CliError::Config("the baseline uses no segmenter".into()));
    }
    let cfg = pipeline_config(args)?;
    let out = run_baseline(&cfg)?;
    match (&cfg.output, &out.report) {
        (None, Some(report)) => print!("{}", stable_json(report)),
        (None, None) => println!("{} points labeled", out.labels.len()),
        (Some(dir), Some(r)) => println!("wrote {}: wrong_points {} mAP {:.4}", dir.display(), r.wrong_points, r.map),
        (Some(dir), None) => println!("wrote {}", dir.display()),
    }
    Ok(())
}

/// Reads instance scores from a plain `{id: score}` object or from the
/// `instances` section of a refine report.
fn read_scores(path: &Path) -> Result<BTreeMap<i32, f64>, CliError> {
    let bad = |msg: &str| CliError::Config(format!("{}: {msg}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(&e.to_string()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| bad(&e.to_string()))?;
    let map = value.get("instances").unwrap_or(&value).as_object().ok_or_else(|| bad("expected an object"))?;
    map.iter()
        .map(|(k, v)| {
            let id = k.parse::<i32>().map_err(|_| bad(&format!("instance id {k:?} is not an integer")))?;
            let score = v.get("score").unwrap_or(v).as_f64().ok_or_else(|| bad(&format!("no score for {k}")))?;
            Ok((id, score))
        })
        .collect()
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    require_dir(&args.bundle)?;
    let scores = args.scores.as_deref().map(read_scores).transpose()?;
    let mut scene = load_scene_bundle(&args.bundle).map_err(stage("load"))?;
    let gt = scene
        .gt_labels
        .take()
        .ok_or_else(|| CliError::Config(format!("bundle {} has no ground truth", args.bundle.display())))?;
    let pred = read_i32(&args.pred).map_err(stage("load"))?;
    ensure_superpoints(&mut scene, &SegParams::default());
    let partition = scene.superpoints.as_ref().expect("superpoints were just ensured");
    let scores = scores.unwrap_or_else(|| pred.iter().map(|&l| (l, 1.0)).collect());
    let report = evaluate(&pred, &gt, partition, &scores).map_err(stage("eval"))?;
    let text = stable_json(&report);
    if let Some(path) = &args.json {
        fs::write(path, &text).map_err(stage("write"))?;
    }
    print!("{text}");
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut cfg: SweepConfig = read_config(args.config.as_deref())?;
    if !args.bundles.is_empty() {
        cfg.bundles = args.bundles;
    }
    if let Some(v) = args.lambdas {
        cfg.lambdas = v;
    }
    if let Some(v) = args.betas {
        cfg.betas = v;
    }
    if let Some(v) = args.modes {
        cfg.modes = v.into_iter().map(PromptMode::from).collect();
    }
    if let Some(v) = args.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = args.threads {
        cfg.threads = Some(v);
    }
    for b in &cfg.bundles {
        require_dir(b)?;
    }
    let rows = run_sweep(&cfg)?;
    write_sweep(&args.out, &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} sweep cells failed", rows.len());
    }
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Superpoints(a) => superpoints(a),
        Command::PerturbBoxes(a) => perturb(a),
        Command::Refine(a) => refine(a),
        Command::Baseline(a) => baseline(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
