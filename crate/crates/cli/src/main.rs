//! `logocap` command-line driver.

mod settings;
mod svg;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use logocap::cmp::NormVariant;
use logocap::coco::{load_coco_keypoints, load_results, save_results, GroundTruth};
use logocap::gradcheck::{report_table, run_all};
use logocap::metrics::{evaluate_ap, mean_oks, upper_bound_oracle, ApOptions};
use logocap::model::PoseSet;
use logocap::pipeline::{
    initial_poses, load_checkpoint, loss_csv, refine_poses, save_checkpoint, train, RefineConfig,
    TrainConfig,
};
use logocap::skeleton::SkeletonSpec;
use logocap::synth::{scene_seed, write_json, FeatureMode, SceneConfig, SceneSet};
use logocap::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use settings::Echo;

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_DIR: &str = "checkpoint";
const THREADS_VAR: &str = "LOGOCAP_THREADS";

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Missing(PathBuf, String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Missing(..) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn read(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf(), e.to_string())
        } else {
            CliError::Validation(format!("{}: {e}", path.display()))
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Missing(p, m) => write!(f, "error: missing input {}: {m}", p.display()),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Missing(path, source.to_string())
            }
            Error::NonFinite(_) | Error::NonFiniteActivation(_) | Error::NonFiniteGradient(_) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "logocap", version, about = "LOGO-CAP pose refinement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Decode initial poses into a COCO results file.
    Decode(DecodeArgs),
    /// Refine decoded poses with a trained checkpoint.
    Refine(RefineArgs),
    /// Train the projection and message-passing head on a scene directory.
    TrainToy(TrainArgs),
    /// Keypoint AP of a results file against ground truth.
    Eval(EvalArgs),
    /// Baseline versus local-window oracle.
    Bound(BoundArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Render SVG charts from a loss CSV and a summary JSON.
    Plot(PlotArgs),
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split([',', '-']).collect();
    let num = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad count `{p}`: {e}"))
    };
    match parts.as_slice() {
        [n] => num(n).map(|n| (n, n)),
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(format!("expected N or LO,HI, got `{s}`")),
    }
}

fn parse_norm(s: &str) -> Result<NormVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_feature_mode(s: &str) -> Result<FeatureMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    /// Output scene directory; must not exist.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes.
    #[arg(long)]
    count: Option<usize>,
    /// Persons per scene, `N` or `LO,HI`.
    #[arg(long, value_parser = parse_range)]
    persons: Option<(usize, usize)>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Std (px) of predicted peak displacement.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    offset_noise: Option<f64>,
    #[arg(long)]
    heatmap_noise: Option<f64>,
    #[arg(long)]
    feature_channels: Option<usize>,
    #[arg(long, value_parser = parse_feature_mode)]
    feature_mode: Option<FeatureMode>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SynthSettings {
    count: usize,
    scene: SceneConfig,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            count: 10,
            scene: SceneConfig::default(),
        }
    }
}

/// Flags shared by the commands that decode initial poses.
#[derive(Args)]
struct InitArgs {
    /// Uniform perturbation (px) applied to decoded keypoints.
    #[arg(long)]
    perturb: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decode from the noiseless maps.
    #[arg(long)]
    clean: bool,
    /// Maximum number of centers per image.
    #[arg(long)]
    max_n: Option<usize>,
    /// Center score threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct InitSettings {
    perturb: f64,
    seed: u64,
    clean: bool,
}

impl InitArgs {
    fn apply(&self, init: &mut InitSettings, refine: &mut RefineConfig) {
        if let Some(v) = self.perturb {
            init.perturb = v;
        }
        if let Some(v) = self.seed {
            init.seed = v;
        }
        if self.clean {
            init.clean = true;
        }
        if let Some(v) = self.max_n {
            refine.max_centers = v;
        }
        if let Some(v) = self.threshold {
            refine.center_threshold = v;
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    init: InitArgs,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct DecodeSettings {
    init: InitSettings,
    refine: RefineConfig,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Checkpoint directory written by `train-toy`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stop after the initial decode.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    init: InitArgs,
    /// Local window size.
    #[arg(long)]
    k: Option<usize>,
    /// Global window size.
    #[arg(long)]
    a: Option<usize>,
    /// Expected latent width of the checkpoint.
    #[arg(long)]
    d: Option<usize>,
    /// Expected norm variant of the checkpoint.
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormVariant>,
    #[arg(long)]
    top1_lambda: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RefineSettings {
    baseline: bool,
    init: InitSettings,
    refine: RefineConfig,
    latent_dim: Option<usize>,
    norm: Option<NormVariant>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Output directory for the checkpoint, loss CSV and config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Maximum optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormVariant>,
    #[arg(long)]
    perturb: Option<f64>,
    #[arg(long)]
    lambda_total: Option<f64>,
    #[arg(long)]
    top1_lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    a: Option<usize>,
    #[arg(long)]
    max_n: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum AreaRange {
    #[default]
    All,
    Medium,
    Large,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    /// Ground-truth JSON, or a scene directory holding `gt.json`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    area: Option<AreaRange>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalSettings {
    area: AreaRange,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Local window size.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    init: InitArgs,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct BoundSettings {
    init: InitSettings,
    refine: RefineConfig,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct GradcheckSettings {
    seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings { seed: 7 }
    }
}

#[derive(Args)]
struct PlotArgs {
    /// Loss CSV written by `train-toy`.
    #[arg(long)]
    loss: Option<PathBuf>,
    /// Summary JSON written by `refine`.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn init_threads() -> CliResult<()> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "{THREADS_VAR} must be a positive integer, got `{v}`"
                ))
            })?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Refine(a) => cmd_refine(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(
            path.to_path_buf(),
            "no such file or directory".into(),
        ))
    }
}

fn require_scene_dir(dir: &Path) -> CliResult<()> {
    require(dir)?;
    require(&dir.join("manifest.json"))?;
    require(&dir.join("gt.json"))
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Validation(format!(
            "output path {} exists and is not a directory",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn echo<T: Serialize>(dir: &Path, echo: &Echo<'_, T>) -> CliResult<()> {
    Ok(write_json(&dir.join(CONFIG_FILE), &echo.to_value())?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require(c)?;
    }
    let mut s: SynthSettings = settings::load(a.config.as_deref())?;
    let sc = &mut s.scene;
    if let Some(v) = a.seed {
        sc.seed = v;
    }
    if let Some(v) = a.count {
        s.count = v;
    }
    if let Some(v) = a.persons {
        sc.persons = v;
    }
    if let Some(v) = a.height {
        sc.height = v;
    }
    if let Some(v) = a.width {
        sc.width = v;
    }
    if let Some(v) = a.stride {
        sc.stride = v;
    }
    if let Some(v) = a.jitter {
        sc.keypoint_jitter = v;
    }
    if let Some(v) = a.offset_noise {
        sc.offset_noise = v;
    }
    if let Some(v) = a.heatmap_noise {
        sc.heatmap_noise = v;
    }
    if let Some(v) = a.feature_channels {
        sc.feature_channels = v;
    }
    if let Some(v) = a.feature_mode {
        sc.feature_mode = v;
    }
    s.scene.validate()?;
    if s.count == 0 {
        return Err(CliError::Validation("count must be at least 1".into()));
    }
    if a.out.exists() {
        return Err(CliError::Validation(format!(
            "output directory {} already exists",
            a.out.display()
        )));
    }
    match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            return Err(CliError::Validation(format!(
                "parent of output directory {} does not exist",
                a.out.display()
            )));
        }
        _ => {}
    }
    let set = SceneSet::generate(&s.scene, s.count)?;
    let cfg = Echo {
        command: "synth",
        inputs: vec![("out", a.out.clone())],
        settings: &s,
    }
    .to_value();
    set.save_with(&a.out, &[(CONFIG_FILE, &cfg)])?;
    println!(
        "wrote {} scenes ({} persons) to {}",
        set.scenes.len(),
        set.scenes.iter().map(|s| s.gts.len()).sum::<usize>(),
        a.out.display()
    );
    Ok(())
}

fn load_scenes(dir: &Path) -> CliResult<SceneSet> {
    require_scene_dir(dir)?;
    Ok(SceneSet::load(dir)?)
}

/// Initial poses of every scene, merged in scene order.
fn decode_all(
    set: &SceneSet,
    init: &InitSettings,
    refine: &RefineConfig,
) -> CliResult<Vec<(u64, PoseSet)>> {
    set.scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let maps = if init.clean {
                &scene.clean_maps
            } else {
                &scene.maps
            };
            let poses = initial_poses(maps, refine, init.perturb, scene_seed(init.seed, i))?;
            Ok((set.image_ids[i], poses))
        })
        .collect()
}

fn check_init(init: &InitSettings, refine: &RefineConfig) -> CliResult<()> {
    refine.validate()?;
    if !(init.perturb >= 0.0) {
        return Err(CliError::Validation("perturb must be >= 0".into()));
    }
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require(c)?;
    }
    require_scene_dir(&a.scenes)?;
    let mut s: DecodeSettings = settings::load(a.config.as_deref())?;
    a.init.apply(&mut s.init, &mut s.refine);
    check_init(&s.init, &s.refine)?;
    prepare_out(&a.out)?;
    let set = load_scenes(&a.scenes)?;
    let results = decode_all(&set, &s.init, &s.refine)?;
    save_results(&results, a.out.join("results.json"))?;
    echo(
        &a.out,
        &Echo {
            command: "decode",
            inputs: vec![("scenes", a.scenes.clone()), ("out", a.out.clone())],
            settings: &s,
        },
    )?;
    println!(
        "decoded {} poses from {} images",
        results.iter().map(|(_, p)| p.len()).sum::<usize>(),
        results.len()
    );
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require(c)?;
    }
    require_scene_dir(&a.scenes)?;
    let mut s: RefineSettings = settings::load(a.config.as_deref())?;
    a.init.apply(&mut s.init, &mut s.refine);
    if a.baseline {
        s.baseline = true;
    }
    if let Some(v) = a.k {
        s.refine.local_window = v;
    }
    if let Some(v) = a.a {
        s.refine.global_window = v;
    }
    if let Some(v) = a.top1_lambda {
        s.refine.top1_lambda = v;
    }
    if let Some(v) = a.d {
        s.latent_dim = Some(v);
    }
    if let Some(v) = a.norm {
        s.norm = Some(v);
    }
    check_init(&s.init, &s.refine)?;
    let params = if s.baseline {
        None
    } else {
        let ck = a.checkpoint.as_deref().ok_or_else(|| {
            CliError::Validation("--checkpoint is required unless --baseline is set".into())
        })?;
        require(ck)?;
        require(&ck.join("checkpoint.json"))?;
        let params = load_checkpoint(ck)?;
        let c = &params.config;
        if let Some(d) = s.latent_dim.filter(|&d| d != c.latent_dim) {
            return Err(CliError::Validation(format!(
                "checkpoint {} has d = {}, config asks for d = {d}",
                ck.display(),
                c.latent_dim
            )));
        }
        if let Some(n) = s.norm.filter(|&n| n != c.norm) {
            return Err(CliError::Validation(format!(
                "checkpoint {} has norm {:?}, config asks for {n:?}",
                ck.display(),
                c.norm
            )));
        }
        if c.window != s.refine.local_window {
            return Err(CliError::Validation(format!(
                "checkpoint {} has k = {}, config asks for k = {}",
                ck.display(),
                c.window,
                s.refine.local_window
            )));
        }
        Some(params)
    };
    prepare_out(&a.out)?;
    let set = load_scenes(&a.scenes)?;
    let spec = SkeletonSpec::coco();
    let initial = decode_all(&set, &s.init, &s.refine)?;
    let results: Vec<(u64, PoseSet)> = match &params {
        None => initial.clone(),
        Some(params) => set
            .scenes
            .par_iter()
            .zip(initial.par_iter())
            .map(|(scene, (id, init))| {
                let maps = if s.init.clean {
                    &scene.clean_maps
                } else {
                    &scene.maps
                };
                let out = refine_poses(maps, init, params, &s.refine, &spec)?;
                Ok((*id, out.poses))
            })
            .collect::<CliResult<_>>()?,
    };
    let gt = set.ground_truth();
    let oracle: Vec<(u64, PoseSet)> = set
        .scenes
        .par_iter()
        .zip(initial.par_iter())
        .map(|(scene, (id, init))| {
            let o = upper_bound_oracle(init, &scene.gts, &spec, s.refine.local_window)?;
            Ok((*id, o.poses))
        })
        .collect::<CliResult<_>>()?;
    let summary = json!({
        "images": set.scenes.len(),
        "baseline_mean_oks": mean_oks(&initial, &gt, &spec),
        "refined_mean_oks": params.as_ref().map(|_| mean_oks(&results, &gt, &spec)),
        "oracle_mean_oks": mean_oks(&oracle, &gt, &spec),
    });
    save_results(&results, a.out.join("results.json"))?;
    write_json(&a.out.join("summary.json"), &summary)?;
    let mut inputs = vec![("scenes", a.scenes.clone()), ("out", a.out.clone())];
    if let Some(ck) = &a.checkpoint {
        inputs.push(("checkpoint", ck.clone()));
    }
    echo(
        &a.out,
        &Echo {
            command: "refine",
            inputs,
            settings: &s,
        },
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn cmd_train_toy(a: TrainArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require(c)?;
    }
    require_scene_dir(&a.scenes)?;
    let mut cfg: TrainConfig = settings::load(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.steps {
        cfg.max_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = a.d {
        cfg.latent_dim = v;
    }
    if let Some(v) = a.norm {
        cfg.norm = v;
    }
    if let Some(v) = a.perturb {
        cfg.perturb = v;
    }
    if let Some(v) = a.lambda_total {
        cfg.loss.lambda_total = v;
    }
    if let Some(v) = a.top1_lambda {
        cfg.loss.top1_lambda = v;
        cfg.refine.top1_lambda = v;
    }
    if let Some(v) = a.k {
        cfg.refine.local_window = v;
    }
    if let Some(v) = a.a {
        cfg.refine.global_window = v;
    }
    if let Some(v) = a.max_n {
        cfg.refine.max_centers = v;
    }
    if let Some(v) = a.threshold {
        cfg.refine.center_threshold = v;
    }
    cfg.refine.validate()?;
    cfg.loss.validate()?;
    if !(cfg.adam.lr > 0.0) || !(cfg.perturb >= 0.0) || cfg.latent_dim == 0 {
        return Err(CliError::Validation(
            "lr and d must be positive, perturb non-negative".into(),
        ));
    }
    prepare_out(&a.out)?;
    let set = load_scenes(&a.scenes)?;
    let spec = SkeletonSpec::coco();
    let outcome = train(&set.scenes, &cfg, &spec)?;
    let ck = a.out.join(CHECKPOINT_DIR);
    if ck.exists() {
        fs::remove_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }
    save_checkpoint(&outcome.params, &ck)?;
    write_text(&a.out.join("loss.csv"), &loss_csv(&outcome.log))?;
    echo(
        &a.out,
        &Echo {
            command: "train-toy",
            inputs: vec![("scenes", a.scenes.clone()), ("out", a.out.clone())],
            settings: &cfg,
        },
    )?;
    match (outcome.log.first(), outcome.log.last()) {
        (Some(f), Some(l)) => println!(
            "trained {} steps, total loss {:.6} -> {:.6}",
            outcome.log.len(),
            f.total,
            l.total
        ),
        _ => println!("no training steps; checkpoint holds the initial parameters"),
    }
    Ok(())
}

fn load_gt(path: &Path) -> CliResult<GroundTruth> {
    require(path)?;
    let file = if path.is_dir() {
        path.join("gt.json")
    } else {
        path.to_path_buf()
    };
    require(&file)?;
    Ok(load_coco_keypoints(&file)?)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require(c)?;
    }
    require(&a.results)?;
    let mut s: EvalSettings = settings::load(a.config.as_deref())?;
    if let Some(v) = a.area {
        s.area = v;
    }
    let gt = load_gt(&a.gt)?;
    if let Some(out) = &a.out {
        prepare_out(out)?;
    }
    let results = load_results(&a.results)?;
    let spec = SkeletonSpec::coco();
    let options = match s.area {
        AreaRange::All => ApOptions::default(),
        AreaRange::Medium => ApOptions::medium(),
        AreaRange::Large => ApOptions::large(),
    };
    let report = evaluate_ap(&results, &gt, &spec, options);
    let csv = report.to_csv();
    if let Some(out) = &a.out {
        write_text(&out.join("ap.csv"), &csv)?;
        write_json(
            &out.join("metrics.json"),
            &json!({
                "ap": report.ap,
                "mean_oks": mean_oks(&results, &gt, &spec),
                "empty": report.empty,
            }),
        )?;
        echo(
            out,
            &Echo {
                command: "eval",
                inputs: vec![("results", a.results.clone()), ("gt", a.gt.clone())],
                settings: &s,
            },
        )?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_bound(a: BoundArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require(c)?;
    }
    require_scene_dir(&a.scenes)?;
    let mut s: BoundSettings = settings::load(a.config.as_deref())?;
    a.init.apply(&mut s.init, &mut s.refine);
    if let Some(k) = a.k {
        s.refine.local_window = k;
    }
    check_init(&s.init, &s.refine)?;
    if let Some(out) = &a.out {
        prepare_out(out)?;
    }
    let set = load_scenes(&a.scenes)?;
    let spec = SkeletonSpec::coco();
    let initial = decode_all(&set, &s.init, &s.refine)?;
    let oracle: Vec<(u64, PoseSet)> = set
        .scenes
        .par_iter()
        .zip(initial.par_iter())
        .map(|(scene, (id, init))| {
            let o = upper_bound_oracle(init, &scene.gts, &spec, s.refine.local_window)?;
            Ok((*id, o.poses))
        })
        .collect::<CliResult<_>>()?;
    let gt = set.ground_truth();
    let stats = |r: &[(u64, PoseSet)]| {
        (
            mean_oks(r, &gt, &spec),
            evaluate_ap(r, &gt, &spec, ApOptions::default()).ap,
        )
    };
    let (b_oks, b_ap) = stats(&initial);
    let (o_oks, o_ap) = stats(&oracle);
    let report = json!({
        "images": set.scenes.len(),
        "k": s.refine.local_window,
        "perturb": s.init.perturb,
        "baseline": {"mean_oks": b_oks, "ap": b_ap},
        "oracle": {"mean_oks": o_oks, "ap": o_ap},
        "gap": {"mean_oks": o_oks - b_oks, "ap": o_ap - b_ap},
    });
    if let Some(out) = &a.out {
        write_json(&out.join("bound.json"), &report)?;
        echo(
            out,
            &Echo {
                command: "bound",
                inputs: vec![("scenes", a.scenes.clone())],
                settings: &s,
            },
        )?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require(c)?;
    }
    let mut s: GradcheckSettings = settings::load(a.config.as_deref())?;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(out) = &a.out {
        prepare_out(out)?;
    }
    let results = run_all(s.seed)?;
    let table = report_table(&results);
    print!("{table}");
    if let Some(out) = &a.out {
        write_text(&out.join("gradcheck.txt"), &table)?;
        echo(
            out,
            &Echo {
                command: "gradcheck",
                inputs: vec![],
                settings: &s,
            },
        )?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn read_loss_csv(path: &Path) -> CliResult<Vec<svg::Series>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Missing(path.to_path_buf(), io.to_string())
        }
        _ => CliError::Validation(format!("{}: {e}", path.display())),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 2 {
        return Err(CliError::Validation(format!(
            "{}: expected a step column and at least one value column",
            path.display()
        )));
    }
    let mut series: Vec<svg::Series> = headers
        .iter()
        .skip(1)
        .map(|h| svg::Series {
            name: h.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            CliError::Validation(format!("{} record {}: {e}", path.display(), row + 1))
        })?;
        let values: Vec<f64> = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| {
                CliError::Validation(format!("{} record {}: {e}", path.display(), row + 1))
            })?;
        for (s, &v) in series.iter_mut().zip(&values[1..]) {
            s.points.push((values[0], v));
        }
    }
    Ok(series)
}

fn cmd_plot(a: PlotArgs) -> CliResult<()> {
    if a.loss.is_none() && a.summary.is_none() {
        return Err(CliError::Validation(
            "plot needs --loss, --summary or both".into(),
        ));
    }
    for p in a.loss.iter().chain(a.summary.iter()) {
        require(p)?;
    }
    let series = a.loss.as_deref().map(read_loss_csv).transpose()?;
    let bars = match &a.summary {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::read(p, e))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            let bars: Vec<(String, f64)> = ["baseline", "refined", "oracle"]
                .iter()
                .filter_map(|k| {
                    v.get(format!("{k}_mean_oks"))
                        .and_then(|x| x.as_f64())
                        .map(|x| (k.to_string(), x))
                })
                .collect();
            if bars.is_empty() {
                return Err(CliError::Validation(format!(
                    "{}: no baseline/refined/oracle mean OKS entries",
                    p.display()
                )));
            }
            Some(bars)
        }
        None => None,
    };
    prepare_out(&a.out)?;
    if let Some(series) = series {
        write_text(
            &a.out.join("loss.svg"),
            &svg::line_chart("training loss", "step", &series),
        )?;
    }
    if let Some(bars) = bars {
        write_text(&a.out.join("oks.svg"), &svg::bar_chart("mean OKS", &bars))?;
    }
    let mut inputs = vec![];
    if let Some(p) = &a.loss {
        inputs.push(("loss", p.clone()));
    }
    if let Some(p) = &a.summary {
        inputs.push(("summary", p.clone()));
    }
    echo(
        &a.out,
        &Echo {
            command: "plot",
            inputs,
            settings: &json!({}),
        },
    )?;
    println!("wrote plots to {}", a.out.display());
    Ok(())
}
