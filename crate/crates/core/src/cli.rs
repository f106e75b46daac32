//! The `pws` command line: scene generation, training, partitioning, certification,
//! attacks and CSV reports over corpus directories.
//!
//! Module errors exit with status 1 and configuration errors with status 2; both
//! print a single `kind: message` line on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{
    certified_accuracy, certify, empirical_attack, frame_budget_comparison, partition_delta, AttackReport,
    CertifyConfig, SampleOutcome, DEFAULT_BASELINE_SAMPLES,
};
use crate::classifier::{builtin_train, LinearSoftmax, TrainConfig, DEFAULT_DOWNSAMPLE};
use crate::error::PwsError;
use crate::formats::write_image;
use crate::geometry::{Axis, MotionSpec};
use crate::intervals::{build_partition, Method, DEFAULT_QUANTILE, DEFAULT_RESOLUTION};
use crate::rasterizer::{default_background, render, render_sweep};
use crate::scenes::{
    capture_camera, extract_one_frame, generate_corpus, Corpus, Scene, SceneParams, ShapeClass, CAPTURE_FACTOR,
};
use crate::smoothing::{SmoothingConfig, DEFAULT_CONFIDENCE_ALPHA, DEFAULT_SAMPLES};
use crate::ColoredPointCloud;

pub const SUMMARY_FILE: &str = "summary.json";
pub const ATTACK_SUMMARY_FILE: &str = "attack_summary.json";
pub const REPORT_COLUMNS: [&str; 6] = ["radius", "method", "sigma", "certified_accuracy", "mean_N", "mean_ratio"];

/// Failure of a command, split by exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Module(PwsError),
}

impl From<PwsError> for CliError {
    fn from(e: PwsError) -> Self {
        CliError::Module(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Module(_) => 1,
        }
    }

    /// The single diagnostic line, `kind: message`.
    pub fn line(&self) -> String {
        match self {
            CliError::Config(m) => format!("ConfigError: {m}"),
            CliError::Module(e) => format!("{}: {e}", e.kind()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "pws", version, about = "Certify classifiers against one-axis camera motion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled corpus of synthetic scenes.
    GenScenes(GenScenesArgs),
    /// Train the built-in linear classifier on reference renders of a corpus.
    Train(TrainArgs),
    /// Write the partition frames of one scene as PWSI1 images.
    Project(ProjectArgs),
    /// Print the partition spacing and frame count for one scene.
    Partition(PartitionArgs),
    /// Certify every scene of a corpus; writes one report per scene and a summary.
    Certify(CertifyArgs),
    /// Evaluate the smoothed classifier at uniformly spaced poses.
    Attack(AttackArgs),
    /// Aggregate certification summaries under a directory into CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    /// Comma-separated classes; all four by default.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 5000)]
    pub points: usize,
    /// Extra rays outside the field of view, in pixels.
    #[arg(long, default_value_t = 0)]
    pub margin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Noise level of the Gaussian augmentation; match the smoothing sigma.
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 8)]
    pub augment: usize,
    #[arg(long, default_value_t = DEFAULT_DOWNSAMPLE)]
    pub downsample: usize,
    #[arg(long, default_value_t = 400)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Motion range and spacing options shared by the partition-based commands.
#[derive(Debug, Clone, Args)]
pub struct MotionArgs {
    /// tx, ty, tz, rx, ry or rz.
    #[arg(long)]
    pub axis: String,
    /// Half-width of the motion range: mm or m for translations, deg or rad for rotations.
    #[arg(long)]
    pub radius: String,
    #[arg(long, default_value = "exact")]
    pub method: String,
    /// δ-convexity prior in pixels; one-frame method only.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    pub quantile: f64,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// One-frame captures are taken at this multiple of the image resolution.
    #[arg(long, default_value_t = CAPTURE_FACTOR)]
    pub capture_factor: usize,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub scene: String,
    #[command(flatten)]
    pub motion: MotionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub scene: String,
    #[command(flatten)]
    pub motion: MotionArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SmoothingArgs {
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub n_samples: u64,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub motion: MotionArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    /// Only these scenes (comma-separated names).
    #[arg(long, value_delimiter = ',')]
    pub scenes: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub axis: String,
    #[arg(long)]
    pub radius: String,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    #[arg(long, default_value_t = 100)]
    pub poses: usize,
    #[arg(long, value_delimiter = ',')]
    pub scenes: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for certification summaries.
    #[arg(long)]
    pub dir: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses a motion radius with its unit into SI (metres or radians). A bare number
/// is taken as SI already.
pub fn parse_radius(text: &str, axis: Axis) -> CliResult<f64> {
    let t = text.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (number, unit) = t.split_at(split);
    let value: f64 = number.trim().parse().or_else(|_| config(format!("radius '{text}' is not a number with a unit")))?;
    let (scale, rotation) = match unit {
        "" => (1.0, axis.is_rotation()),
        "mm" => (1e-3, false),
        "m" => (1.0, false),
        "deg" => (std::f64::consts::PI / 180.0, true),
        "rad" => (1.0, true),
        other => return config(format!("unknown radius unit '{other}' (use mm, m, deg or rad)")),
    };
    if rotation != axis.is_rotation() {
        return config(format!("unit '{unit}' does not fit axis {axis}"));
    }
    Ok(value * scale)
}

fn parse<T: std::str::FromStr<Err = PwsError>>(text: &str) -> CliResult<T> {
    text.parse().map_err(|e: PwsError| CliError::Config(e.to_string()))
}

fn motion_spec(axis: &str, radius: &str) -> CliResult<MotionSpec> {
    let axis: Axis = parse(axis)?;
    let r = parse_radius(radius, axis)?;
    MotionSpec::new(axis, r).map_err(|e| CliError::Config(e.to_string()))
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_dir() {
        return config(format!("{what} '{}' is not a directory", path.display()));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return config(format!("{what} '{}' does not exist", path.display()));
    }
    Ok(())
}

/// Writes through a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(PwsError::from)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(PwsError::from)?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(PwsError::from)?;
    tmp.persist(path).map_err(|e| PwsError::from(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(PwsError::from)? + "\n";
    write_atomic(path, text.as_bytes())
}

fn read_corpus(dir: &Path) -> CliResult<Corpus> {
    require_dir(dir, "corpus")?;
    Ok(Corpus::read(dir)?)
}

fn select<'a>(corpus: &'a Corpus, names: &[String]) -> CliResult<Vec<&'a Scene>> {
    if names.is_empty() {
        return Ok(corpus.scenes.iter().collect());
    }
    names
        .iter()
        .map(|n| match corpus.scenes.iter().find(|s| &s.name == n) {
            Some(s) => Ok(s),
            None => config(format!("scene '{n}' is not in the corpus")),
        })
        .collect()
}

fn load_model(path: &Path) -> CliResult<LinearSoftmax> {
    require_file(path, "model")?;
    Ok(LinearSoftmax::load(path)?)
}

fn smoothing_config(args: &SmoothingArgs) -> CliResult<SmoothingConfig> {
    SmoothingConfig::new(args.sigma, args.n_samples, args.alpha, args.seed).map_err(|e| CliError::Config(e.to_string()))
}

struct Motion {
    spec: MotionSpec,
    cfg: CertifyConfig,
    capture_factor: usize,
}

fn motion(args: &MotionArgs, smoothing: SmoothingConfig, channels: usize) -> CliResult<Motion> {
    let spec = motion_spec(&args.axis, &args.radius)?;
    let method: Method = parse(&args.method)?;
    if method == Method::OneFrame && args.delta.is_none() {
        return config("the one-frame method needs --delta");
    }
    if method != Method::OneFrame && args.delta.is_some() {
        return config("--delta only applies to the one-frame method");
    }
    if args.capture_factor == 0 {
        return config("--capture-factor must be positive");
    }
    let mut cfg = CertifyConfig::new(method, smoothing, channels);
    cfg.quantile = args.quantile;
    cfg.resolution = args.resolution;
    cfg.delta = args.delta;
    Ok(Motion { spec, cfg, capture_factor: args.capture_factor })
}

impl Motion {
    /// One-frame capture of `cloud`, only for the one-frame method.
    fn capture(&self, cloud: &ColoredPointCloud, corpus: &Corpus) -> CliResult<Option<ColoredPointCloud>> {
        if self.cfg.method != Method::OneFrame {
            return Ok(None);
        }
        let cam = capture_camera(&corpus.camera, self.capture_factor)?;
        Ok(Some(extract_one_frame(cloud, &cam)?))
    }
}

/// Smoothing settings are irrelevant to spacing; any valid value will do.
fn spacing_only() -> SmoothingConfig {
    SmoothingConfig::new(1.0, DEFAULT_SAMPLES, DEFAULT_CONFIDENCE_ALPHA, 0).unwrap()
}

fn cmd_gen_scenes(a: &GenScenesArgs) -> CliResult<()> {
    let classes = if a.classes.is_empty() {
        ShapeClass::ALL.to_vec()
    } else {
        a.classes.iter().map(|c| parse::<ShapeClass>(c)).collect::<CliResult<Vec<_>>>()?
    };
    if a.per_class == 0 {
        return config("--per-class must be positive");
    }
    let params = SceneParams { point_count: a.points, margin: a.margin, ..SceneParams::default() };
    params.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let corpus = generate_corpus(&classes, a.per_class, &params, a.seed)?;
    corpus.write(&a.out)?;
    println!("wrote {} scenes to {}", corpus.scenes.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let zero = MotionSpec::new(Axis::Tx, 1.0)?.value(0.0)?;
    let background = default_background(corpus.scenes.first().map_or(3, |s| s.cloud.channels()));
    let data = corpus
        .scenes
        .par_iter()
        .map(|s| Ok((render(&s.cloud, &zero, &corpus.camera, &background)?, s.label)))
        .collect::<crate::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        noise_sigma: a.sigma,
        augment_count: a.augment,
        seed: a.seed,
        downsample: a.downsample,
        epochs: a.epochs,
        ..TrainConfig::default()
    };
    let model = builtin_train(&data, &cfg)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(PwsError::from)?;
    }
    model.save(&a.out)?;
    println!("trained on {} images, model written to {}", data.len(), a.out.display());
    Ok(())
}

fn find_scene<'a>(corpus: &'a Corpus, name: &str) -> CliResult<&'a Scene> {
    Ok(select(corpus, &[name.to_string()])?[0])
}

fn cmd_partition(a: &PartitionArgs) -> CliResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let scene = find_scene(&corpus, &a.scene)?;
    let m = motion(&a.motion, spacing_only(), scene.cloud.channels())?;
    let one = m.capture(&scene.cloud, &corpus)?;
    let estimate = partition_delta(&scene.cloud, one.as_ref(), &m.spec, &corpus.camera, &m.cfg)?;
    let plan = build_partition(estimate.delta_alpha, &m.spec, m.cfg.method, m.cfg.quantile)?;
    println!("{}", serde_json::to_string_pretty(&plan.summary()).map_err(PwsError::from)?);
    Ok(())
}

fn cmd_project(a: &ProjectArgs) -> CliResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let scene = find_scene(&corpus, &a.scene)?;
    let m = motion(&a.motion, spacing_only(), scene.cloud.channels())?;
    let one = m.capture(&scene.cloud, &corpus)?;
    let estimate = partition_delta(&scene.cloud, one.as_ref(), &m.spec, &corpus.camera, &m.cfg)?;
    let plan = build_partition(estimate.delta_alpha, &m.spec, m.cfg.method, m.cfg.quantile)?;
    std::fs::create_dir_all(&a.out).map_err(PwsError::from)?;
    let width = plan.n().to_string().len().max(5);
    for (c, values) in plan.values.chunks(256).enumerate() {
        let frames = render_sweep(&scene.cloud, &m.spec, &corpus.camera, values, &m.cfg.background)?;
        for (j, frame) in frames.iter().enumerate() {
            write_image(&a.out.join(format!("frame_{:0width$}.pwsi", c * 256 + j)), frame)?;
        }
    }
    write_json(&a.out.join("partition.json"), &plan.summary())?;
    println!("wrote {} frames to {}", plan.n(), a.out.display());
    Ok(())
}

/// Corpus-level result of a certify run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifySummary {
    pub axis: Axis,
    /// Motion radius in metres or radians.
    pub radius: f64,
    pub method: Method,
    pub sigma: f64,
    pub quantile: f64,
    pub n_samples: u64,
    pub confidence_alpha: f64,
    pub seed: u64,
    pub certified_accuracy: f64,
    /// Mean partition count over samples that produced a report.
    #[serde(rename = "mean_N")]
    pub mean_n: Option<f64>,
    /// Mean of N over the Monte Carlo baseline's frame budget.
    pub mean_ratio: Option<f64>,
    pub samples: Vec<SampleOutcome>,
}

fn cmd_certify(a: &CertifyArgs) -> CliResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let model = load_model(&a.model)?;
    let scenes = select(&corpus, &a.scenes)?;
    let channels = scenes.first().map_or(3, |s| s.cloud.channels());
    let smoothing = smoothing_config(&a.smoothing)?;
    let m = motion(&a.motion, smoothing.clone(), channels)?;
    std::fs::create_dir_all(&a.out).map_err(PwsError::from)?;

    // Samples run one after another; each certification already fans out over frames.
    let mut samples = Vec::with_capacity(scenes.len());
    let mut ratios = Vec::new();
    for scene in scenes {
        let index = corpus.scenes.iter().position(|s| s.name == scene.name).unwrap_or(0) as u64;
        let mut cfg = m.cfg.clone();
        cfg.smoothing = smoothing.derive(index);
        let result = m
            .capture(&scene.cloud, &corpus)
            .and_then(|one| Ok(certify(&scene.cloud, one.as_ref(), &m.spec, &corpus.camera, &model, &cfg)?));
        match result {
            Ok(report) => {
                let text = report.deterministic_json()? + "\n";
                write_atomic(&a.out.join(format!("{}.json", scene.name)), text.as_bytes())?;
                write_json(&a.out.join(format!("{}.timing.json", scene.name)), &report.timing)?;
                ratios.push((report.n as f64, frame_budget_comparison(&report, DEFAULT_BASELINE_SAMPLES)?));
                samples.push(SampleOutcome::from_report(&scene.name, scene.label, &report));
            }
            Err(CliError::Module(e)) => {
                log::warn!("{}: {}: {e}", scene.name, e.kind());
                samples.push(SampleOutcome::from_error(&scene.name, scene.label, &e));
            }
            Err(e) => return Err(e),
        }
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let summary = CertifySummary {
        axis: m.spec.axis,
        radius: m.spec.radius,
        method: m.cfg.method,
        sigma: smoothing.sigma,
        quantile: m.cfg.quantile,
        n_samples: smoothing.n_samples,
        confidence_alpha: smoothing.confidence_alpha,
        seed: smoothing.seed,
        certified_accuracy: certified_accuracy(&samples)?,
        mean_n: mean(ratios.iter().map(|r| r.0).collect()),
        mean_ratio: mean(ratios.iter().map(|r| r.1).collect()),
        samples,
    };
    write_json(&a.out.join(SUMMARY_FILE), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(PwsError::from)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub axis: Axis,
    pub radius: f64,
    pub sigma: f64,
    pub poses: usize,
    pub empirical_robust_accuracy: f64,
    pub reports: BTreeMap<String, AttackReport>,
}

fn cmd_attack(a: &AttackArgs) -> CliResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let model = load_model(&a.model)?;
    let scenes = select(&corpus, &a.scenes)?;
    let spec = motion_spec(&a.axis, &a.radius)?;
    let smoothing = smoothing_config(&a.smoothing)?;
    if a.poses == 0 {
        return config("--poses must be positive");
    }
    std::fs::create_dir_all(&a.out).map_err(PwsError::from)?;
    let mut reports = BTreeMap::new();
    let mut robust_correct = 0;
    for scene in &scenes {
        let index = corpus.scenes.iter().position(|s| s.name == scene.name).unwrap_or(0) as u64;
        let background = default_background(scene.cloud.channels());
        let report = empirical_attack(
            &scene.cloud,
            &spec,
            &corpus.camera,
            &model,
            &smoothing.derive(index),
            &background,
            a.poses,
        )?;
        if report.empirically_robust && report.reference_label == scene.label {
            robust_correct += 1;
        }
        write_json(&a.out.join(format!("{}.attack.json", scene.name)), &report)?;
        reports.insert(scene.name.clone(), report);
    }
    let summary = AttackSummary {
        axis: spec.axis,
        radius: spec.radius,
        sigma: smoothing.sigma,
        poses: a.poses,
        empirical_robust_accuracy: robust_correct as f64 / scenes.len().max(1) as f64,
        reports,
    };
    write_json(&a.out.join(ATTACK_SUMMARY_FILE), &summary)?;
    println!(
        "empirical robust accuracy {:.4} over {} scenes",
        summary.empirical_robust_accuracy,
        scenes.len()
    );
    Ok(())
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            find_summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// CSV with [`REPORT_COLUMNS`], one row per summary, sorted by method, sigma and radius.
pub fn report_csv(summaries: &[CertifySummary]) -> String {
    let mut rows: Vec<&CertifySummary> = summaries.iter().collect();
    rows.sort_by(|a, b| {
        (a.method.as_str(), a.axis.as_str())
            .cmp(&(b.method.as_str(), b.axis.as_str()))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.radius.total_cmp(&b.radius))
    });
    let mut out = REPORT_COLUMNS.join(",") + "\n";
    for s in rows {
        out += &format!(
            "{},{},{},{},{},{}\n",
            s.radius,
            s.method,
            s.sigma,
            s.certified_accuracy,
            fmt_opt(s.mean_n),
            fmt_opt(s.mean_ratio)
        );
    }
    out
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    require_dir(&a.dir, "report directory")?;
    let mut paths = Vec::new();
    find_summaries(&a.dir, &mut paths).map_err(PwsError::from)?;
    if paths.is_empty() {
        return config(format!("no {SUMMARY_FILE} under '{}'", a.dir.display()));
    }
    let summaries = paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
        .collect::<crate::Result<Vec<CertifySummary>>>()?;
    let csv = report_csv(&summaries);
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("PWS_THREADS") else { return Ok(()) };
    let threads: usize = match value.trim().parse() {
        Ok(t) if t > 0 => t,
        _ => return config(format!("PWS_THREADS must be a positive integer, got '{value}'")),
    };
    // A pool built earlier in the process (tests) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenScenes(a) => cmd_gen_scenes(a),
        Command::Train(a) => cmd_train(a),
        Command::Project(a) => cmd_project(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
