//! Subcommands of the `nmslab` binary. Every command resolves its settings
//! from defaults, an optional JSON config file and flags (in that order),
//! writes the resolved settings next to its outputs and stamps outputs with
//! their fingerprint.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{compare_margins, loss_correlation, monotonicity_sweep, phantom_stats, AnalysisLoss, MarginSearch};
use crate::attacks::{pgd_batch, AttackConfig, AttackFamily, AttackRecord, Norm, PerturbationBudget};
use crate::data::{generate_dataset, Dataset, SceneSpec};
use crate::defense::{schedule_csv, underload_train, AtConfig, ScheduleDirection};
use crate::detector::{
    load_checkpoint, profile_backbone, save_checkpoint, train, ArchConfig, Checkpoint, DetectorParams, GtObject, Image,
    Sample, TrainConfig,
};
use crate::error::{LabError, Result};
use crate::evalkit::{detect_all, latency_report, map50, LatencyReport, REPORT_FORMAT_VERSION};
use crate::fileio::{fingerprint, read_file, write_atomic, write_json_atomic};
use crate::latency::{budget_from_fps, calibrate, capacity, fit_piecewise, CapacityReport, LatencyModelFile};
use crate::nms::{microbenchmark, BenchSample, NmsConfig, WorkloadKind, WorkloadSpec, DEFAULT_MEMORY_GUARD};
use crate::rng::split_named;

/// Candidate counts of the 64x64 toy detector map onto the box counts of a
/// full-size detector (25200 candidates) by this factor.
pub const DEFAULT_COUNT_SCALE: f64 = 25200.0 / 1344.0;

#[derive(Debug, Parser)]
#[command(name = "nmslab", version, about = "NMS latency attacks and background-attentive adversarial training on a toy detector")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON file with settings for the subcommand; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Time greedy NMS on synthetic workloads and the detector forward pass.
    ProfileNms(ProfileArgs),
    /// Fit the latency model to a profile.
    FitLatency(FitArgs),
    /// Largest candidate count that fits a frame-rate budget.
    Capacity(CapacityArgs),
    /// Train the detector.
    Train(TrainArgs),
    /// Attack every image of a dataset.
    Attack(AttackArgs),
    /// Capacity-driven background-attentive adversarial training.
    Defend(DefendArgs),
    /// Clean and attacked mAP50 plus predicted frame rate.
    Eval(EvalArgs),
    /// Loss correlation, boundary margins, phantom locations, mask sweep.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    /// File name inside the output directory.
    #[arg(long, default_value = "dataset.bin")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Comma-separated workload sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, value_enum)]
    pub workload: Option<WorkloadKind>,
    /// Checkpoint whose forward pass is timed; default: a fresh detector.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Output of `profile-nms`.
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub count_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    /// Latency model from `fit-latency`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fps: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value = "model.ckpt")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub family: Option<AttackFamily>,
    #[arg(long, value_enum)]
    pub norm: Option<Norm>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    /// Starting weights; every stage restarts from them.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set for the stopping rule.
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fps: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub start_ratio: Option<f64>,
    #[arg(long)]
    pub ratio_step: Option<f64>,
    #[arg(long, value_enum)]
    pub direction: Option<ScheduleDirection>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub standard: PathBuf,
    #[arg(long)]
    pub defended: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Latency model for frame-rate prediction.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Skip attacks; report clean mAP50 only.
    #[arg(long)]
    pub clean_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Correlation,
    Margins,
    Phantoms,
    Sweep,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub analysis: Analysis,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
}

// ---------------------------------------------------------------------------
// Settings

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataSettings {
    pub seed: u64,
    pub n: usize,
    pub scene: SceneSpec,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        Self { seed: 0, n: 256, scene: SceneSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSettings {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub workload: WorkloadSpec,
    pub nms: NmsConfig,
    pub backbone_repeats: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: vec![100, 200, 500, 1000, 2000, 3000, 5000, 7000, 10000],
            repeats: 5,
            workload: WorkloadSpec::default(),
            nms: NmsConfig::default(),
            backbone_repeats: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub count_scale: f64,
    pub with_intercept: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { count_scale: DEFAULT_COUNT_SCALE, with_intercept: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { arch: ArchConfig::default(), train: TrainConfig { epochs: 30, ..Default::default() }, init_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSettings {
    pub seed: u64,
    pub attack: AttackConfig,
    pub budget: PerturbationBudget,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self { seed: 0, attack: AttackConfig::default(), budget: PerturbationBudget::reference() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefendSettings {
    pub at: AtConfig,
    pub fps: f64,
}

impl Default for DefendSettings {
    fn default() -> Self {
        Self { at: AtConfig::default(), fps: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub seed: u64,
    pub nms: NmsConfig,
    pub families: Vec<AttackFamily>,
    pub budget: PerturbationBudget,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            nms: NmsConfig::default(),
            families: vec![AttackFamily::Overload, AttackFamily::Phantom, AttackFamily::DaedalusLike],
            budget: PerturbationBudget::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeSettings {
    pub seed: u64,
    pub correlation_budget: PerturbationBudget,
    pub margin: MarginSearch,
    pub phantom_budget: PerturbationBudget,
    pub sweep_ratios: Vec<f64>,
    pub sweep_budget: PerturbationBudget,
    pub conf_threshold: f64,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            correlation_budget: PerturbationBudget::new(Norm::L2, 7.0, 20),
            margin: MarginSearch::default(),
            phantom_budget: PerturbationBudget::reference(),
            sweep_ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5],
            sweep_budget: PerturbationBudget::new(Norm::L2, 7.0, 20),
            conf_threshold: 0.25,
        }
    }
}

/// Defaults overlaid with the config file, if any.
pub fn load_settings<T: DeserializeOwned + Default>(config: Option<&Path>) -> Result<T> {
    match config {
        None => Ok(T::default()),
        Some(p) => serde_json::from_slice(&read_file(p)?).map_err(|e| LabError::format(p, format!("invalid config: {e}"))),
    }
}

/// Resolved settings with their fingerprint, as written next to outputs.
#[derive(Debug, Serialize)]
struct Resolved<'a, T: Serialize> {
    format_version: u32,
    command: &'a str,
    fingerprint: String,
    settings: &'a T,
}

fn write_resolved<T: Serialize>(out: &Path, command: &str, settings: &T) -> Result<String> {
    let fp = fingerprint(&(command, settings));
    write_json_atomic(&out.join(format!("{command}.config.json")), &Resolved { format_version: REPORT_FORMAT_VERSION, command, fingerprint: fp.clone(), settings })?;
    Ok(fp)
}

/// Writes a CSV whose first line is a comment naming the format version and
/// the producing fingerprint.
fn write_csv(path: &Path, fp: &str, body: &str) -> Result<()> {
    let text = format!("# nmslab format_version={REPORT_FORMAT_VERSION} fingerprint={fp}\n{body}");
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn check_compatible(params: &DetectorParams, data: &Dataset, path: &Path) -> Result<()> {
    let a = &params.arch;
    if data.header.height != a.image_size || data.header.width != a.image_size {
        return Err(LabError::format(
            path,
            format!("images are {}x{}, the detector expects {}x{}", data.header.height, data.header.width, a.image_size, a.image_size),
        ));
    }
    if data.header.class_names.len() != a.num_classes {
        return Err(LabError::format(
            path,
            format!("dataset has {} classes, the detector {}", data.header.class_names.len(), a.num_classes),
        ));
    }
    Ok(())
}

fn load_model_file(path: &Path) -> Result<LatencyModelFile> {
    let f: LatencyModelFile =
        serde_json::from_slice(&read_file(path)?).map_err(|e| LabError::format(path, format!("not a latency model: {e}")))?;
    if f.format_version != crate::latency::MODEL_FORMAT_VERSION {
        return Err(LabError::format(
            path,
            format!("latency model version {} (expected {})", f.format_version, crate::latency::MODEL_FORMAT_VERSION),
        ));
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Commands

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    ensure_dir(&g.out)?;
    let cfg = g.config.as_deref();
    match cli.command {
        Command::GenData(a) => {
            let mut s: GenDataSettings = load_settings(cfg)?;
            if let Some(seed) = g.seed {
                s.seed = seed;
            }
            if let Some(n) = a.n {
                s.n = n;
            }
            if let Some(m) = a.max_objects {
                s.scene.max_objects = m;
                s.scene.min_objects = s.scene.min_objects.min(m);
            }
            write_resolved(&g.out, "gen-data", &s)?;
            let ds = generate_dataset(&s.scene, s.seed, s.n)?;
            let path = g.out.join(&a.name);
            ds.save(&path)?;
            println!("wrote {} images to {}", ds.samples.len(), path.display());
        }
        Command::ProfileNms(a) => {
            let mut s: ProfileSettings = load_settings(cfg)?;
            if let Some(seed) = g.seed {
                s.seed = seed;
            }
            s.workload.seed = s.seed;
            if let Some(v) = a.sizes {
                s.sizes = v;
            }
            if let Some(r) = a.repeats {
                s.repeats = r;
            }
            if let Some(w) = a.workload {
                s.workload.kind = w;
            }
            let fp = write_resolved(&g.out, "profile-nms", &s)?;
            let samples = microbenchmark(&s.workload, &s.sizes, s.repeats, &s.nms, DEFAULT_MEMORY_GUARD)?;
            let params = match &a.checkpoint {
                Some(p) => load_checkpoint(p)?.params,
                None => DetectorParams::init(ArchConfig::default(), s.seed)?,
            };
            let backbone_ns = profile_backbone(&params, s.backbone_repeats)?;
            let profile = ProfileFile { format_version: REPORT_FORMAT_VERSION, fingerprint: fp, backbone_ns, samples };
            write_json_atomic(&g.out.join("profile.json"), &profile)?;
            for b in &profile.samples {
                println!("{:>6} boxes  {:>10} ns", b.size, b.median_ns);
            }
            println!("backbone {backbone_ns} ns");
        }
        Command::FitLatency(a) => {
            let mut s: FitSettings = load_settings(cfg)?;
            if let Some(c) = a.count_scale {
                s.count_scale = c;
            }
            let profile: ProfileFile = serde_json::from_slice(&read_file(&a.profile)?)
                .map_err(|e| LabError::format(&a.profile, format!("not a profile-nms output: {e}")))?;
            let fp = write_resolved(&g.out, "fit-latency", &(&s, &profile.fingerprint))?;
            let points: Vec<(u64, f64)> = profile.samples.iter().map(|b| (b.size as u64, b.median_ns as f64 * 1e-9)).collect();
            let piecewise = fit_piecewise(&points)?;
            let traces: Vec<_> = profile.samples.iter().map(|b| b.trace).collect();
            let two = calibrate(&traces, profile.backbone_ns, s.with_intercept)?.with_count_scale(s.count_scale);
            let file = LatencyModelFile::new(&piecewise, &two, fp);
            write_json_atomic(&g.out.join("latency.json"), &file)?;
            println!("alpha {:.4e} beta {:.4e} r2 {:.4} backbone {} ns", file.alpha, file.beta, file.r2, file.t_backbone_ns);
        }
        Command::Capacity(a) => {
            let file = load_model_file(&a.model)?;
            let report = capacity_for_fps(&file, a.fps)?;
            write_resolved(&g.out, "capacity", &(a.fps, &file.fingerprint))?;
            write_json_atomic(&g.out.join("capacity.json"), &report)?;
            println!("C_max = {} candidates at {} FPS", report.c_max, a.fps);
        }
        Command::Train(a) => {
            let mut s: TrainSettings = load_settings(cfg)?;
            if let Some(seed) = g.seed {
                s.train.seed = seed;
                s.init_seed = seed;
            }
            if let Some(e) = a.epochs {
                s.train.epochs = e;
            }
            if let Some(lr) = a.lr {
                s.train.optimizer.lr = lr;
            }
            if let Some(b) = a.batch_size {
                s.train.batch_size = b;
            }
            let data = Dataset::load(&a.data)?;
            s.arch.num_classes = data.header.class_names.len();
            s.arch.image_size = data.header.height;
            let fp = write_resolved(&g.out, "train", &(&s, &data.header.fingerprint))?;
            let p0 = DetectorParams::init(s.arch.clone(), s.init_seed)?;
            check_compatible(&p0, &data, &a.data)?;
            let report = train(&p0, &data.samples, &s.train)?;
            save_checkpoint(&g.out.join(&a.name), &Checkpoint::new(report.params, fp.clone()))?;
            let mut csv = String::from("epoch,cls,ciou,obj,total\n");
            for (i, l) in report.loss_trace.iter().enumerate() {
                csv.push_str(&format!("{i},{:.6},{:.6},{:.6},{:.6}\n", l.cls, l.ciou, l.obj, l.total));
            }
            write_csv(&g.out.join("train_log.csv"), &fp, &csv)?;
            if let Some(l) = report.loss_trace.last() {
                println!("final loss {:.4} after {} steps", l.total, report.steps);
            }
        }
        Command::Attack(a) => {
            let mut s: AttackSettings = load_settings(cfg)?;
            if let Some(seed) = g.seed {
                s.seed = seed;
            }
            if let Some(f) = a.family {
                s.attack.family = f;
            }
            if let Some(n) = a.norm {
                s.budget.norm = n;
            }
            if let Some(e) = a.epsilon {
                s.budget.epsilon = e;
            }
            if let Some(k) = a.steps {
                s.budget.steps = k;
            }
            let ck = load_checkpoint(&a.checkpoint)?;
            let data = Dataset::load(&a.data)?;
            check_compatible(&ck.params, &data, &a.data)?;
            s.attack.validate(&ck.params.arch)?;
            let fp = write_resolved(&g.out, "attack", &(&s, &data.header.fingerprint, ck.weights_fingerprint()))?;
            let images: Vec<&Image> = data.samples.iter().map(|x| &x.image).collect();
            let results = pgd_batch(&ck.params, &images, &s.budget, &s.attack, s.seed)?;
            let records: Vec<AttackRecord> = results
                .iter()
                .enumerate()
                .map(|(i, r)| AttackRecord::new(&s.attack, &s.budget, r, crate::rng::split(s.seed, i as u64)))
                .collect();
            write_json_atomic(&g.out.join("attack.json"), &AttackFile { format_version: REPORT_FORMAT_VERSION, fingerprint: fp.clone(), records: records.clone() })?;
            let attacked: Vec<Sample> = data
                .samples
                .iter()
                .zip(&results)
                .map(|(x, r)| Sample { image: r.apply(&x.image), objects: x.objects.clone() })
                .collect();
            Dataset::from_samples(attacked, data.header.class_names.clone(), data.header.seed, fp)?.save(&g.out.join("attacked.bin"))?;
            let clean: f64 = records.iter().map(|r| r.clean_count as f64).sum::<f64>() / records.len() as f64;
            let att: f64 = records.iter().map(|r| r.attacked_count as f64).sum::<f64>() / records.len() as f64;
            println!("{}: mean candidates {clean:.1} -> {att:.1}", s.attack.family.label());
        }
        Command::Defend(a) => {
            let mut s: DefendSettings = load_settings(cfg)?;
            s.fps = a.fps;
            if let Some(seed) = g.seed {
                s.at.train.seed = seed;
            }
            if let Some(e) = a.epochs {
                s.at.train.epochs = e;
            }
            if let Some(r) = a.start_ratio {
                s.at.start_ratio = r;
            }
            if let Some(d) = a.ratio_step {
                s.at.ratio_step = d;
            }
            if let Some(d) = a.direction {
                s.at.direction = d;
            }
            let ck = load_checkpoint(&a.checkpoint)?;
            let data = Dataset::load(&a.data)?;
            let val = Dataset::load(&a.val)?;
            check_compatible(&ck.params, &data, &a.data)?;
            check_compatible(&ck.params, &val, &a.val)?;
            let model = load_model_file(&a.model)?;
            let cap = capacity_for_fps(&model, s.fps)?;
            let fp = write_resolved(
                &g.out,
                "defend",
                &(&s, &data.header.fingerprint, &val.header.fingerprint, ck.weights_fingerprint(), &model.fingerprint),
            )?;
            println!("C_max = {} at {} FPS", cap.c_max, s.fps);
            let result = underload_train(&ck.params, &data.samples, &val.samples, &s.at, cap.c_max as f64);
            let result = match result {
                Ok(r) => r,
                Err(e) => return Err(e),
            };
            write_csv(&g.out.join("schedule.csv"), &fp, &schedule_csv(&result.log))?;
            let mut out = Checkpoint::new(result.params, fp.clone());
            out.accepted_mask_ratio = Some(result.accepted_ratio);
            save_checkpoint(&g.out.join("defended.ckpt"), &out)?;
            let last = result.log.last().expect("at least one stage");
            println!(
                "accepted ratio {:.2}: attacked count {:.1} < {} (clean mAP50 {:.3})",
                result.accepted_ratio, last.attacked_count_mean, cap.c_max, last.clean_map50
            );
        }
        Command::Eval(a) => {
            let mut s: EvalSettings = load_settings(cfg)?;
            if let Some(seed) = g.seed {
                s.seed = seed;
            }
            if a.clean_only {
                s.families.clear();
            }
            let data = Dataset::load(&a.data)?;
            let model = a.model.as_deref().map(load_model_file).transpose()?;
            let mut models = vec![("standard".to_string(), load_checkpoint(&a.standard)?)];
            if let Some(d) = &a.defended {
                models.push(("defended".to_string(), load_checkpoint(d)?));
            }
            let fps: Vec<String> = models.iter().map(|m| m.1.weights_fingerprint()).collect();
            let fp = write_resolved(&g.out, "eval", &(&s, &data.header.fingerprint, &fps, model.as_ref().map(|m| &m.fingerprint)))?;
            let mut rows = Vec::new();
            for (name, ck) in &models {
                check_compatible(&ck.params, &data, &a.data)?;
                rows.push(evaluate_model(name, &ck.params, &data.samples, &s, model.as_ref())?);
            }
            let report = EvalReport { format_version: REPORT_FORMAT_VERSION, fingerprint: fp, rows };
            write_json_atomic(&g.out.join("eval.json"), &report)?;
            print!("{}", report.table());
        }
        Command::Analyze(a) => {
            let mut s: AnalyzeSettings = load_settings(cfg)?;
            if let Some(seed) = g.seed {
                s.seed = seed;
            }
            let ck = load_checkpoint(&a.checkpoint)?;
            let data = Dataset::load(&a.data)?;
            check_compatible(&ck.params, &data, &a.data)?;
            let samples = &data.samples[..a.limit.unwrap_or(data.samples.len()).min(data.samples.len())];
            let fp = write_resolved(&g.out, "analyze", &(&s, a.analysis, &data.header.fingerprint, ck.weights_fingerprint()))?;
            analyze(a.analysis, &ck.params, samples, &s, &g.out, &fp)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileFile {
    pub format_version: u32,
    pub fingerprint: String,
    pub backbone_ns: u64,
    pub samples: Vec<BenchSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackFile {
    pub format_version: u32,
    pub fingerprint: String,
    pub records: Vec<AttackRecord>,
}

/// Capacity for a frame rate under the stored model.
pub fn capacity_for_fps(file: &LatencyModelFile, fps: f64) -> Result<CapacityReport> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(LabError::Config(format!("fps must be positive, got {fps}")));
    }
    capacity(&file.two_term(), budget_from_fps(fps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackColumn {
    pub family: String,
    pub map50: f64,
    pub mean_count: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub clean_map50: f64,
    pub clean_mean_count: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_latency: Option<LatencyReport>,
    pub attacks: Vec<AttackColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Fixed-width table: one row per model, clean then per-attack mAP50.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>8}", "model", "clean");
        if let Some(r) = self.rows.first() {
            for a in &r.attacks {
                s.push_str(&format!(" {:>14}", a.family));
            }
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<10} {:>8.1}", r.model, 100.0 * r.clean_map50));
            for a in &r.attacks {
                s.push_str(&format!(" {:>14.1}", 100.0 * a.map50));
            }
            s.push('\n');
        }
        s
    }
}

/// Clean and attacked mAP50 (attacked images scored against the clean
/// ground truth) and mean candidate counts.
pub fn evaluate_model(
    name: &str,
    params: &DetectorParams,
    samples: &[Sample],
    s: &EvalSettings,
    model: Option<&LatencyModelFile>,
) -> Result<EvalRow> {
    let gts: Vec<Vec<GtObject>> = samples.iter().map(|x| x.objects.clone()).collect();
    let images: Vec<&Image> = samples.iter().map(|x| &x.image).collect();
    let lat = |counts: &[usize]| model.map(|m| latency_report(counts, &m.two_term())).transpose();
    let (dets, counts) = detect_all(params, &images, &s.nms)?;
    let clean_map50 = map50(&dets, &gts, params.arch.num_classes)?.map50;
    let mean = |c: &[usize]| c.iter().sum::<usize>() as f64 / c.len().max(1) as f64;
    let mut attacks = Vec::new();
    for (k, &family) in s.families.iter().enumerate() {
        let cfg = AttackConfig { conf_threshold: s.nms.conf_threshold, ..AttackConfig::family(family) };
        let res = pgd_batch(params, &images, &s.budget, &cfg, split_named(s.seed, family.label()).wrapping_add(k as u64))?;
        let attacked: Vec<Image> = res.iter().zip(&images).map(|(r, im)| r.apply(im)).collect();
        let refs: Vec<&Image> = attacked.iter().collect();
        let (adets, acounts) = detect_all(params, &refs, &s.nms)?;
        attacks.push(AttackColumn {
            family: family.label().to_string(),
            map50: map50(&adets, &gts, params.arch.num_classes)?.map50,
            mean_count: mean(&acounts),
            latency: lat(&acounts)?,
        });
    }
    Ok(EvalRow { model: name.to_string(), clean_map50, clean_mean_count: mean(&counts), clean_latency: lat(&counts)?, attacks })
}

fn analyze(kind: Analysis, params: &DetectorParams, samples: &[Sample], s: &AnalyzeSettings, out: &Path, fp: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a, T: Serialize> {
        format_version: u32,
        fingerprint: &'a str,
        analysis: Analysis,
        result: T,
    }
    let summary = |result: &dyn erased::Json| -> Result<()> {
        let path = out.join(format!("{}.json", kind_name(kind)));
        write_json_atomic(&path, &Summary { format_version: REPORT_FORMAT_VERSION, fingerprint: fp, analysis: kind, result: result.value() })
    };
    match kind {
        Analysis::Correlation => {
            let adv = AnalysisLoss::Adv(AttackConfig::family(AttackFamily::Overload));
            let obj = loss_correlation(params, samples, &adv, &AnalysisLoss::Obj, &s.correlation_budget, s.seed)?;
            let cls = loss_correlation(params, samples, &adv, &AnalysisLoss::Cls, &s.correlation_budget, s.seed)?;
            let mut csv = String::from("step,median_cosine_adv_obj,median_pearson_adv_obj,median_cosine_adv_cls,median_pearson_adv_cls\n");
            for k in 0..obj.median_cosine.len() {
                csv.push_str(&format!(
                    "{k},{:.6},{:.6},{:.6},{:.6}\n",
                    obj.median_cosine[k], obj.median_pearson[k], cls.median_cosine[k], cls.median_pearson[k]
                ));
            }
            write_csv(&out.join("correlation.csv"), &fp, &csv)?;
            summary(&serde_json::json!({ "adv_obj": obj, "adv_cls": cls }))?;
            println!("final median cosine: adv/obj {:.3}, adv/cls {:.3}", obj.median_cosine.last().unwrap(), cls.median_cosine.last().unwrap());
        }
        Analysis::Margins => {
            let (pairs, cmp) = compare_margins(params, samples, &s.margin)?;
            let mut csv = String::from("image,background,background_crossed,object,object_crossed\n");
            for (i, (b, o)) in pairs.iter().enumerate() {
                csv.push_str(&format!("{i},{:.6},{},{:.6},{}\n", b.censored(), b.upper_bound.is_some(), o.censored(), o.upper_bound.is_some()));
            }
            write_csv(&out.join("margins.csv"), &fp, &csv)?;
            summary(&serde_json::json!({ "comparison": cmp, "pairs": pairs }))?;
            println!("mean margin upper bound: background {:.3}, object {:.3}", cmp.mean_background, cmp.mean_object);
        }
        Analysis::Phantoms => {
            let cfg = AttackConfig { conf_threshold: s.conf_threshold, ..AttackConfig::family(AttackFamily::Overload) };
            let images: Vec<&Image> = samples.iter().map(|x| &x.image).collect();
            let res = pgd_batch(params, &images, &s.phantom_budget, &cfg, s.seed)?;
            let deltas: Vec<Vec<f64>> = res.into_iter().map(|r| r.delta).collect();
            let st = phantom_stats(params, samples, &deltas, s.conf_threshold)?;
            let mut csv = String::from("image,on_object,off_object,mass_per_on_phantom,mass_per_off_phantom\n");
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            for (i, p) in st.per_image.iter().enumerate() {
                csv.push_str(&format!("{i},{},{},{},{}\n", p.on_object, p.off_object, opt(p.mass_per_on_phantom), opt(p.mass_per_off_phantom)));
            }
            write_csv(&out.join("phantoms.csv"), &fp, &csv)?;
            summary(&st)?;
            println!("off-object phantoms dominate on {:.0}% of images", 100.0 * st.off_dominant_fraction);
        }
        Analysis::Sweep => {
            let r = monotonicity_sweep(params, samples, &s.sweep_ratios, &s.sweep_budget, s.conf_threshold, s.seed)?;
            let mut csv = String::from("ratio,mean_perturbable_pixels,mean_attacked_count\n");
            for p in &r.points {
                csv.push_str(&format!("{:.4},{:.2},{:.4}\n", p.ratio, p.mean_perturbable_pixels, p.mean_attacked_count));
            }
            write_csv(&out.join("sweep.csv"), &fp, &csv)?;
            summary(&r)?;
            println!("Spearman(perturbable pixels, attacked count) = {:.3}", r.spearman);
        }
    }
    Ok(())
}

fn kind_name(kind: Analysis) -> &'static str {
    match kind {
        Analysis::Correlation => "correlation",
        Analysis::Margins => "margins",
        Analysis::Phantoms => "phantoms",
        Analysis::Sweep => "sweep",
    }
}

mod erased {
    /// Object-safe view of a serializable value.
    pub trait Json {
        fn value(&self) -> serde_json::Value;
    }

    impl<T: serde::Serialize> Json for T {
        fn value(&self) -> serde_json::Value {
            serde_json::to_value(self).expect("analysis results serialize")
        }
    }
}
