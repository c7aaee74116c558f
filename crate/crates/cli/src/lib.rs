//! Subcommands of the `segperf` binary.
//!
//! Every command writes its files deterministically and prints a short report
//! to the supplied writer. Reports show mIoU quantities in percent with two
//! decimals; files store raw values in `[0, 1]`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use segperf::frameio::{self, DepthMap, ImageTensor, SegMap};
use segperf::metrics::{ErrorSummary, MetricSample, ScaleMode};
use segperf::perturb::{self, PerturbationKind, PerturbationSpec, DEFAULT_EPS_255};
use segperf::pipeline::{self, SyntheticRunConfig};
use segperf::regress::{self, RegressionModel};
use segperf::samples::{self, Manifest, ManifestEntry};
use segperf::seed;
use segperf::synthmodel::DegradationConfig;
use segperf::timeagg::{
    self, AggregationConfig, AggregationRow, PredictedSample, SeriesGrid, WindowMode,
    DEFAULT_DELTA_N, DEFAULT_FPS, DEFAULT_K,
};

#[derive(Debug, Parser)]
#[command(
    name = "segperf",
    version,
    about = "Predict segmentation mIoU online from depth accuracy"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic validation and test manifests with predictions
    Simulate(SimulateArgs),
    /// Write perturbed copies of every clean frame of a manifest
    Perturb(PerturbArgs),
    /// Score predictions of a manifest into a samples CSV
    Evaluate(EvaluateArgs),
    /// Fit the ACC to mIoU regression on validation samples
    Calibrate(CalibrateArgs),
    /// Predict mIoU for test samples
    Predict(PredictArgs),
    /// Temporally aggregated errors per window size
    Aggregate(AggregateArgs),
    /// Per-perturbation summary plus aggregation table
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WindowArg {
    /// True frame order, windows spaced K frames apart
    Sequential,
    /// Random members, for unordered test sets
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct AggregationArgs {
    /// Window sizes (odd)
    #[arg(long = "delta-n", value_delimiter = ',', default_values_t = DEFAULT_DELTA_N.to_vec())]
    pub delta_n: Vec<usize>,
    /// Frame spacing inside a window
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Frame rate in frames per second
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    #[arg(long, value_enum, default_value_t = WindowArg::Sequential)]
    pub window: WindowArg,
    /// Seed of random window selection
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only aggregate these strengths (1/255 units)
    #[arg(long = "eps-255", value_delimiter = ',')]
    pub eps_255: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub val_frames: usize,
    #[arg(long, default_value_t = 150)]
    pub test_frames: usize,
    #[arg(long = "eps-255", value_delimiter = ',', default_values_t = DEFAULT_EPS_255.to_vec())]
    pub eps_255: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = PerturbationKind::ALL.to_vec())]
    pub perturb: Vec<PerturbationKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the severity shared by both tasks
    #[arg(long, default_value_t = 0.9)]
    pub coupling: f64,
    #[arg(long = "num-classes", default_value_t = 6)]
    pub num_classes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "eps-255", value_delimiter = ',', default_values_t = DEFAULT_EPS_255.to_vec())]
    pub eps_255: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = PerturbationKind::ALL.to_vec())]
    pub perturb: Vec<PerturbationKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output samples CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Global depth scale
    #[arg(long, conflicts_with = "scale_from")]
    pub scale: Option<f64>,
    /// Calibrate the depth scale on the clean frames of this validation manifest
    #[arg(long)]
    pub scale_from: Option<PathBuf>,
    #[arg(long = "scale-mode", default_value = "median-ratio")]
    pub scale_mode: ScaleMode,
    /// Class count for entries that do not state one
    #[arg(long = "num-classes", default_value_t = 19)]
    pub num_classes: usize,
    /// Perturbation tags to evaluate (default: every tag in the manifest)
    #[arg(long, value_delimiter = ',')]
    pub perturb: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Validation samples CSV
    #[arg(long)]
    pub samples: PathBuf,
    /// Output model JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test samples CSV
    #[arg(long)]
    pub samples: PathBuf,
    /// Output predictions CSV (acc, miou and miou_pred per sample)
    #[arg(long)]
    pub out: PathBuf,
    /// Validation samples; test frames must not appear in them
    #[arg(long)]
    pub val_samples: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub aggregation: AggregationArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Directory for summary.csv and aggregation.csv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub aggregation: AggregationArgs,
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Perturb(a) => cmd_perturb(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Aggregate(a) => cmd_aggregate(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn rho(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |r| format!("{r:.2}"))
}

fn rel(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

fn absolute(manifest: &Manifest, relative: &str) -> Result<String> {
    let p = std::path::absolute(manifest.resolve(relative))?;
    Ok(rel(&p))
}

fn eps_dir(kind: PerturbationKind, eps: f64) -> String {
    format!("{kind}_{eps}")
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = SyntheticRunConfig {
        val_frames: args.val_frames,
        test_frames: args.test_frames,
        kinds: args.perturb.clone(),
        eps_255: args.eps_255.clone(),
        seed: args.seed,
        ..SyntheticRunConfig::default()
    };
    config.scene.num_classes = args.num_classes;
    config.degradation = DegradationConfig {
        coupling: args.coupling,
        ..config.degradation
    };
    fs::create_dir_all(&args.out)?;
    let total = args.val_frames + args.test_frames;
    let entries = (0..total)
        .into_par_iter()
        .map(|i| write_synthetic_frame(&config, i, &args.out))
        .collect::<Result<Vec<_>>>()?;
    let (val, test) = entries.split_at(args.val_frames);
    for (name, part) in [("val.jsonl", val), ("test.jsonl", test)] {
        let flat: Vec<ManifestEntry> = part.iter().flatten().cloned().collect();
        Manifest::write(args.out.join(name), &flat)?;
    }
    writeln!(
        out,
        "simulated {} validation and {} test frames, {} entries per frame, in {}",
        args.val_frames,
        args.test_frames,
        entries.first().map_or(0, Vec::len),
        args.out.display()
    )?;
    Ok(())
}

fn write_synthetic_frame(
    config: &SyntheticRunConfig,
    index: usize,
    root: &Path,
) -> Result<Vec<ManifestEntry>> {
    let frame = pipeline::synthesize_frame(config, index)?;
    let rec = &frame.scene.record;
    let id = rec.frame_id.clone();
    let dir = Path::new("frames").join(&id);
    fs::create_dir_all(root.join(&dir))?;
    let seg_gt = dir.join("seg_gt.png");
    let depth_gt = dir.join("depth_gt.png");
    frameio::save_seg_map(
        rec.seg_gt.as_ref().expect("synthetic gt"),
        root.join(&seg_gt),
    )?;
    frameio::save_depth_map(
        rec.depth_gt.as_ref().expect("synthetic gt"),
        root.join(&depth_gt),
    )?;

    let write_output =
        |sub: &Path, image: &ImageTensor, seg: &SegMap, depth: &DepthMap| -> Result<[String; 3]> {
            fs::create_dir_all(root.join(sub))?;
            let paths = [
                sub.join("image.png"),
                sub.join("seg_pred.png"),
                sub.join("depth_pred.png"),
            ];
            frameio::save_image(image, root.join(&paths[0]))?;
            frameio::save_seg_map(seg, root.join(&paths[1]))?;
            frameio::save_depth_prediction(depth, root.join(&paths[2]))?;
            Ok(paths.map(|p| rel(&p)))
        };
    let entry =
        |paths: [String; 3], kind: Option<PerturbationKind>, eps: Option<f64>| ManifestEntry {
            frame_id: id.clone(),
            image: paths[0].clone(),
            seg_gt: Some(rel(&seg_gt)),
            seg_pred: Some(paths[1].clone()),
            depth_pred: Some(paths[2].clone()),
            depth_gt: Some(rel(&depth_gt)),
            perturbation: kind.map(|k| k.to_string()),
            epsilon_255: eps,
            num_classes: Some(config.scene.num_classes),
        };

    let c = &frame.clean;
    let mut entries = vec![entry(
        write_output(&dir.join("clean"), &c.image, &c.seg_pred, &c.depth_pred)?,
        None,
        None,
    )];
    for o in &frame.perturbed {
        let kind = o.kind.expect("perturbed output has a kind");
        let sub = dir.join(eps_dir(kind, o.epsilon_255));
        let paths = write_output(&sub, &o.image, &o.seg_pred, &o.depth_pred)?;
        entries.push(entry(paths, Some(kind), Some(o.epsilon_255)));
    }
    Ok(entries)
}

pub fn cmd_perturb(args: &PerturbArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::read(&args.manifest)?;
    let mut seen = BTreeSet::new();
    let clean: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.perturbation.is_none() && seen.insert(e.frame_id.clone()))
        .collect();
    if clean.is_empty() {
        bail!(
            "{} has no clean entries to perturb",
            args.manifest.display()
        );
    }
    for &eps in &args.eps_255 {
        PerturbationSpec::new(PerturbationKind::Gaussian, eps, 0)?;
    }
    fs::create_dir_all(&args.out)?;
    let per_frame = clean
        .par_iter()
        .map(|e| -> Result<Vec<ManifestEntry>> {
            let image = frameio::load_image(manifest.resolve(&e.image))
                .with_context(|| format!("frame {}", e.frame_id))?;
            let gt = |p: &Option<String>| p.as_deref().map(|p| absolute(&manifest, p)).transpose();
            let base = ManifestEntry {
                frame_id: e.frame_id.clone(),
                image: absolute(&manifest, &e.image)?,
                seg_gt: gt(&e.seg_gt)?,
                seg_pred: None,
                depth_pred: None,
                depth_gt: gt(&e.depth_gt)?,
                perturbation: None,
                epsilon_255: None,
                num_classes: e.num_classes,
            };
            let mut entries = vec![ManifestEntry {
                seg_pred: gt(&e.seg_pred)?,
                depth_pred: gt(&e.depth_pred)?,
                ..base.clone()
            }];
            fs::create_dir_all(args.out.join(&e.frame_id))?;
            for &kind in &args.perturb {
                for &eps in &args.eps_255 {
                    let spec = PerturbationSpec::new(
                        kind,
                        eps,
                        seed::derive_seed(
                            args.seed,
                            &format!("perturb/{}/{kind}/{eps}", e.frame_id),
                        ),
                    )?;
                    let img = perturb::perturb_image(&image, &spec)?;
                    let path = Path::new(&e.frame_id).join(format!("{}.png", eps_dir(kind, eps)));
                    frameio::save_image(&img, args.out.join(&path))?;
                    entries.push(ManifestEntry {
                        image: rel(&path),
                        perturbation: Some(kind.to_string()),
                        epsilon_255: Some(eps),
                        ..base.clone()
                    });
                }
            }
            Ok(entries)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<ManifestEntry> = per_frame.into_iter().flatten().collect();
    Manifest::write(args.out.join("manifest.jsonl"), &entries)?;
    writeln!(
        out,
        "wrote {} perturbed images for {} frames to {}",
        entries.len() - clean.len(),
        clean.len(),
        args.out.display()
    )?;
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::read(&args.manifest)?;
    let scale = match (&args.scale, &args.scale_from) {
        (Some(s), _) => *s,
        (None, Some(val_path)) => {
            let val = Manifest::read(val_path)?;
            let same = fs::canonicalize(val_path)? == fs::canonicalize(&args.manifest)?;
            if !same {
                samples::check_disjoint(&val, &manifest)?;
            }
            pipeline::calibrate_scale_from_manifest(&val, args.num_classes, args.scale_mode)?
        }
        (None, None) => bail!("pass --scale or --scale-from <validation manifest>"),
    };
    if !(scale > 0.0 && scale.is_finite()) {
        bail!("depth scale {scale} must be > 0");
    }
    let tasks = pipeline::plan_evaluation(&manifest, &args.perturb);
    let eval = pipeline::evaluate_manifest(&manifest, &tasks, args.num_classes, scale)?;
    samples::write_samples(&args.out, &eval.samples)?;
    writeln!(out, "depth scale: {scale}")?;
    writeln!(out, "samples: {}", eval.samples.len())?;
    if let Some(m) = eval.clean_miou() {
        writeln!(out, "clean mIoU: {}", pct(m))?;
    }
    if !eval.skipped.is_empty() {
        writeln!(
            out,
            "skipped {} sample(s) with undefined metrics:",
            eval.skipped.len()
        )?;
        for s in &eval.skipped {
            writeln!(out, "  {s}")?;
        }
    }
    Ok(())
}

pub fn cmd_calibrate(args: &CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let val = samples::read_samples(&args.samples)?;
    let model = regress::fit_quadratic(&val)?;
    model.save(&args.out)?;
    let t = model.theta;
    writeln!(
        out,
        "mIoU = {:.6} + {:.6}·ACC + {:.6}·ACC²",
        t[0], t[1], t[2]
    )?;
    writeln!(out, "calibrated on {} samples", model.meta.sample_count)?;
    Ok(())
}

fn write_summary_table(out: &mut dyn Write, rows: &[(String, ErrorSummary)]) -> Result<()> {
    writeln!(
        out,
        "{:<14} {:>7} {:>6} {:>8} {:>8}",
        "perturbation", "count", "rho", "MAE", "RMSE"
    )?;
    for (name, s) in rows {
        writeln!(
            out,
            "{:<14} {:>7} {:>6} {:>8} {:>8}",
            name,
            s.count,
            rho(s.rho),
            pct(s.mae),
            pct(s.rmse)
        )?;
    }
    Ok(())
}

fn write_aggregation_table(out: &mut dyn Write, rows: &[AggregationRow]) -> Result<()> {
    writeln!(
        out,
        "{:>5} {:>10} {:>6} {:>8} {:>8}",
        "ΔN", "latency_s", "rho", "MAE", "RMSE"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:>5} {:>10} {:>6} {:>8} {:>8}",
            r.delta_n,
            r.latency_s,
            rho(r.summary.rho),
            pct(r.summary.mae),
            pct(r.summary.rmse)
        )?;
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let model = RegressionModel::load(&args.model)
        .with_context(|| format!("model {}", args.model.display()))?;
    let test = samples::read_samples(&args.samples)?;
    if let Some(v) = &args.val_samples {
        let val: BTreeSet<String> = samples::read_samples(v)?
            .into_iter()
            .map(|s| s.frame_id)
            .collect();
        if let Some(s) = test.iter().find(|s| val.contains(&s.frame_id)) {
            bail!(
                "frame {:?} appears in both validation and test samples",
                s.frame_id
            );
        }
    }
    let predictions = pipeline::predict(&model, &test);
    samples::write_predictions(&args.out, &predictions)?;
    write_summary_table(out, &pipeline::kind_summaries(&predictions)?)?;
    Ok(())
}

fn aggregation_rows(
    predictions: &[PredictedSample],
    args: &AggregationArgs,
) -> Result<Vec<AggregationRow>> {
    let grid = SeriesGrid::from_samples(predictions, args.eps_255.as_deref())?;
    let configs = args
        .delta_n
        .iter()
        .map(|&d| AggregationConfig::new(d, args.k, args.fps))
        .collect::<segperf::Result<Vec<_>>>()?;
    let mode = match args.window {
        WindowArg::Sequential => WindowMode::Sequential,
        WindowArg::Random => WindowMode::Random { seed: args.seed },
    };
    Ok(timeagg::aggregation_report(&grid, &configs, mode)?)
}

pub fn cmd_aggregate(args: &AggregateArgs, out: &mut dyn Write) -> Result<()> {
    let predictions = samples::read_predictions(&args.predictions)?;
    let rows = aggregation_rows(&predictions, &args.aggregation)?;
    samples::write_aggregation(&args.out, &rows)?;
    write_aggregation_table(out, &rows)
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let predictions = samples::read_predictions(&args.predictions)?;
    fs::create_dir_all(&args.out_dir)?;
    let summaries = pipeline::kind_summaries(&predictions)?;
    samples::write_summaries(args.out_dir.join("summary.csv"), &summaries)?;
    let rows = aggregation_rows(&predictions, &args.aggregation)?;
    samples::write_aggregation(args.out_dir.join("aggregation.csv"), &rows)?;
    let clean: Vec<MetricSample> = predictions.iter().map(|p| p.sample.clone()).collect();
    if let Some(m) = pipeline::clean_miou(&clean) {
        writeln!(out, "clean mIoU: {}", pct(m))?;
    }
    write_summary_table(out, &summaries)?;
    writeln!(out)?;
    write_aggregation_table(out, &rows)
}
