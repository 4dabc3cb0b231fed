//! Command-line entry point.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::decoder::{read_estimate, read_maps, DecoderMode, PoseEstimate};
use crate::error::{Error, Result};
use crate::eval::{export_heatmap, DEFAULT_THRESHOLDS};
use crate::gradcheck::{gradient_check, GradCheckOptions, GradModule};
use crate::graph::Graph;
use crate::synthdata::{generate_scenes, read_dataset, read_sample, write_dataset, SceneSpec};
use crate::trainer::{self, load_checkpoint, prepare, BatchItem, Prepared, TrainConfig, Trainer};

pub const THREADS_ENV: &str = "XMODAL_THREADS";
pub const ABLATION_FILE: &str = "ablation.csv";
/// Relative-error bound for the gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Aerial/LiDAR cross-modal pose estimation")]
struct Cli {
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write the checkpoint and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Estimate the pose of one sample and export heatmaps.
    Localize(LocalizeArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every ablation variant.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 576)]
    count: usize,
    /// Index of the first sample.
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 64)]
    tile_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pixels_per_meter: f64,
    #[arg(long, default_value_t = 8)]
    buildings: usize,
    #[arg(long, default_value_t = 3)]
    roads: usize,
    #[arg(long, default_value_t = 360)]
    rays: usize,
    #[arg(long, default_value_t = 30.0)]
    max_range: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Trailing samples held out for validation.
    #[arg(long, default_value_t = 64)]
    val_count: usize,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "force_ground_truth")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Export heatmaps for the first N samples.
    #[arg(long, default_value_t = 0)]
    heatmaps: usize,
    #[arg(long, hide = true)]
    force_ground_truth: bool,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample directory containing aerial.ppm, cloud.xyz and meta.csv.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Module name or `all`.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Distort analytic gradients; the check must then fail.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
}

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub cross_attn: bool,
    pub multiscale: bool,
    pub likelihood: bool,
    pub reg_loss: bool,
    pub contrastive: bool,
    pub fourier: bool,
}

const FULL: Variant = Variant {
    name: "full",
    cross_attn: true,
    multiscale: true,
    likelihood: true,
    reg_loss: true,
    contrastive: true,
    fourier: true,
};

pub const ABLATION: [Variant; 7] = [
    FULL,
    Variant {
        name: "concat_fusion",
        cross_attn: false,
        ..FULL
    },
    Variant {
        name: "single_scale",
        multiscale: false,
        ..FULL
    },
    Variant {
        name: "regression_decoder",
        likelihood: false,
        ..FULL
    },
    Variant {
        name: "no_reg_loss",
        reg_loss: false,
        ..FULL
    },
    Variant {
        name: "no_contrastive",
        contrastive: false,
        ..FULL
    },
    Variant {
        name: "no_fourier",
        fourier: false,
        ..FULL
    },
];

impl Variant {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        let b = |v: bool| if v { "true" } else { "false" };
        cfg.set("fusion_mode", if self.cross_attn { "cross_attn" } else { "concat" })?;
        cfg.set("use_multiscale", b(self.multiscale))?;
        cfg.set("decoder", if self.likelihood { "likelihood" } else { "regression" })?;
        cfg.set("use_reg", b(self.reg_loss))?;
        cfg.set("use_contrastive", b(self.contrastive))?;
        cfg.set("use_fourier", b(self.fourier))?;
        cfg.validate()
    }

    fn flags(&self) -> [bool; 6] {
        [self.cross_attn, self.multiscale, self.likelihood, self.reg_loss, self.contrastive, self.fourier]
    }
}

/// Ablation thresholds cover both the default recall levels and the 2 m / 2°
/// columns of the ablation tables.
pub const ABLATION_THRESHOLDS: [f64; 4] = [1.0, 2.0, 3.0, 5.0];

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for usage errors, 1 for failures.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count(cli.deterministic) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `xmodal --help` for usage.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn thread_count(deterministic: bool) -> std::result::Result<usize, String> {
    if deterministic {
        return Ok(1);
    }
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(avail),
    }
}

fn require_file(p: &Path, what: &str) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} is not a directory", p.display())))
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a.run),
        Command::Eval(a) => eval(a),
        Command::Localize(a) => localize(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a.run),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let spec = SceneSpec {
        seed: a.seed,
        tile_size: a.tile_size,
        pixels_per_meter: a.pixels_per_meter,
        n_buildings: a.buildings,
        n_roads: a.roads,
        lidar_rays: a.rays,
        lidar_range: a.max_range,
        noise_sigma: a.noise,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let scenes = generate_scenes(&spec, a.seed, a.start, a.count)?;
    let manifest = write_dataset(&scenes, &a.out, a.start)?;
    println!("wrote {} samples to {}", scenes.len(), manifest.display());
    Ok(())
}

fn run_config(a: &RunArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config file")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Loads the dataset and splits off the trailing `val_count` samples.
fn split_dataset(root: &Path, val_count: usize) -> CliResult<(Vec<Prepared>, Vec<Prepared>)> {
    require_dir(root, "dataset")?;
    let mut data = prepare(&read_dataset(root)?)?;
    if val_count >= data.len() {
        return Err(Failure::Usage(format!(
            "--val-count {val_count} leaves no training samples out of {}",
            data.len()
        )));
    }
    let val = data.split_off(data.len() - val_count);
    Ok((data, val))
}

fn train(a: RunArgs) -> CliResult<()> {
    let cfg = run_config(&a)?;
    let (train, val) = split_dataset(&a.dataset, a.val_count)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let p = a.out.join("config.txt");
    fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    let mut t = Trainer::new(cfg)?;
    let summaries = t.fit(&train, Some(&val), Some(&a.out))?;
    for s in &summaries {
        let mut line = format!("epoch {:>3} train {:.4}", s.epoch, s.train.total);
        if let (Some(v), Some(l), Some(o)) = (s.val, s.val_loc_error, s.val_ori_error) {
            let _ = write!(line, " val {:.4} loc {l:.2} m ori {o:.2} deg", v.total);
        }
        println!("{line}");
    }
    for p in trainer::run_outputs(&a.out) {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    require_dir(&a.dataset, "dataset")?;
    let data = prepare(&read_dataset(&a.dataset)?)?;
    let truths: Vec<_> = data.iter().map(|p| p.pose).collect();
    let ids: Vec<&str> = data.iter().map(|p| p.id.as_str()).collect();
    let estimates = if a.force_ground_truth {
        truths.iter().map(|&pose| oracle_estimate(pose)).collect()
    } else {
        let ck = a.checkpoint.as_deref().expect("required by the parser");
        require_file(ck, "checkpoint")?;
        let (cfg, model, params) = load_checkpoint(ck)?;
        if a.heatmaps > 0 && cfg.model.decoder == DecoderMode::Likelihood {
            let dir = a.out.join("heatmaps");
            for p in data.iter().take(a.heatmaps) {
                localize_one(&model, &params, &cfg, p, Some(&dir))?;
            }
        }
        trainer::evaluate(&model, &params, &data, &cfg)?.estimates
    };
    let report = crate::eval::compute_metrics(&estimates, &truths, &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS)?
        .with_ids(&ids)?;
    let label = a
        .checkpoint
        .as_deref()
        .and_then(|p| p.parent())
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    report.write(&a.out, &label)?;
    print!("{}", report.text_table(&label));
    Ok(())
}

fn oracle_estimate(pose: crate::geometry::Pose) -> PoseEstimate {
    PoseEstimate {
        pose,
        confidence: 1.0,
        cell: (0, 0),
        bin: 0,
        loc_map: Vec::new(),
        ori_slice: Vec::new(),
    }
}

fn localize_one(
    model: &crate::model::Model,
    params: &crate::params::ParamStore,
    cfg: &TrainConfig,
    p: &Prepared,
    heatmap_dir: Option<&Path>,
) -> Result<(PoseEstimate, Vec<PathBuf>)> {
    let item = BatchItem::plain(p, cfg)?;
    let mut g = Graph::new(params);
    let vars = model.forward(&mut g, &item.input)?;
    let est = read_estimate(
        &g,
        &vars.decoder,
        cfg.model.bins,
        p.tile.pixels_per_meter,
        p.tile.height,
        p.tile.width,
    )?;
    let mut written = Vec::new();
    if let (Some(dir), DecoderMode::Likelihood) = (heatmap_dir, cfg.model.decoder) {
        let maps = read_maps(&g, &vars.decoder, cfg.model.bins)?;
        written = export_heatmap(&maps, &p.tile, dir, &p.id)?;
    }
    Ok((est, written))
}

fn localize(a: LocalizeArgs) -> CliResult<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_dir(&a.sample, "sample")?;
    let (cfg, model, params) = load_checkpoint(&a.checkpoint)?;
    let root = a.sample.parent().unwrap_or(Path::new("."));
    let id = a
        .sample
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Failure::Usage(format!("cannot take a sample id from {}", a.sample.display())))?;
    let sample = read_sample(root, &id, 0)?;
    let prepared = prepare(std::slice::from_ref(&sample))?.remove(0);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (est, written) = localize_one(&model, &params, &cfg, &prepared, Some(&a.out))?;
    let p = a.out.join("pose.csv");
    let text = format!(
        "x,y,theta,confidence\n{},{},{},{}\n",
        est.pose.x, est.pose.y, est.pose.theta, est.confidence
    );
    fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    println!(
        "pose x {:.2} m, y {:.2} m, theta {:.1} deg, confidence {:.3}",
        est.pose.x, est.pose.y, est.pose.theta, est.confidence
    );
    for w in std::iter::once(&p).chain(&written) {
        println!("wrote {}", w.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let modules = GradModule::parse(&a.module).map_err(|e| Failure::Usage(e.to_string()))?;
    if !(a.h > 0.0) || a.samples == 0 {
        return Err(Failure::Usage("--h and --samples must be positive".into()));
    }
    let opts = GradCheckOptions {
        samples: a.samples,
        h: a.h,
        corrupt: a.inject_fault,
    };
    let mut csv = String::from("module,coords,max_rel_error,pass\n");
    let mut failed = Vec::new();
    for m in modules {
        let r = gradient_check(m, a.seed, &opts)?;
        let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
        let _ = writeln!(csv, "{},{},{:e},{}", r.module, r.coords, r.max_rel_error, pass);
        println!(
            "{:<20} {:>4} coords  max rel err {:.3e}  {}",
            r.module,
            r.coords,
            r.max_rel_error,
            if pass { "ok" } else { "FAILED" }
        );
        if !pass {
            println!("  worst {}", r.worst);
            failed.push(r.module);
        }
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("gradcheck.csv");
        fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

/// Header of the ablation CSV for the given report columns.
pub fn ablation_header(report_columns: &[String]) -> String {
    let mut h = vec![
        "variant".to_string(),
        "cross_attn".into(),
        "multiscale".into(),
        "likelihood_decoder".into(),
        "reg_loss".into(),
        "contrastive".into(),
        "fourier".into(),
    ];
    h.extend_from_slice(report_columns);
    h.join(",")
}

fn ablate(a: RunArgs) -> CliResult<()> {
    let base = run_config(&a)?;
    let (train, val) = split_dataset(&a.dataset, a.val_count)?;
    let truths: Vec<_> = val.iter().map(|p| p.pose).collect();
    let ids: Vec<&str> = val.iter().map(|p| p.id.as_str()).collect();
    let mut csv = String::new();
    let mut table = String::new();
    for v in ABLATION {
        let mut cfg = base.clone();
        v.apply(&mut cfg)?;
        let dir = a.out.join(v.name);
        let mut t = Trainer::new(cfg)?;
        t.fit(&train, None, Some(&dir))?;
        let ev = t.evaluate(&val)?;
        let report =
            crate::eval::compute_metrics(&ev.estimates, &truths, &ABLATION_THRESHOLDS, &ABLATION_THRESHOLDS)?
                .with_ids(&ids)?;
        report.write(&dir, v.name)?;
        if csv.is_empty() {
            csv = ablation_header(&report.summary_columns()) + "\n";
        }
        let mut row: Vec<String> = vec![v.name.to_string()];
        row.extend(v.flags().iter().map(|f| f.to_string()));
        row.extend(report.summary_values().iter().map(|x| x.to_string()));
        csv += &(row.join(",") + "\n");
        table += &report.text_table(v.name);
        println!(
            "{:<20} loc {:.2} m  ori {:.2} deg",
            v.name, report.mean_loc_error, report.mean_ori_error
        );
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let p = a.out.join(ABLATION_FILE);
    fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
    let t = a.out.join("ablation.txt");
    fs::write(&t, &table).map_err(|e| Error::io(&t, e))?;
    println!("wrote {}", p.display());
    Ok(())
}

/// Parses an ablation CSV into `(variant, values)` rows, checking that every
/// row is complete.
pub fn parse_ablation(text: &str) -> Result<(Vec<String>, Vec<(String, Vec<String>)>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::invalid("empty ablation CSV"))?
        .split(',')
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for l in lines {
        let f: Vec<String> = l.split(',').map(String::from).collect();
        if f.len() != header.len() || f.iter().any(|x| x.is_empty()) {
            return Err(Error::invalid(format!("incomplete ablation row {l:?}")));
        }
        rows.push((f[0].clone(), f[1..].to_vec()));
    }
    Ok((header, rows))
}
