//! `soyscan`: plot-level seed counting and yield estimation from side-view
//! fisheye frames.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod error;
mod pipeline;
mod stages;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soyscan::ranking::{report_table, scores, write_venn_sets};
use soyscan::spatial::AdjustmentSummary;
use soyscan::synthfield;

use crate::config::Config;
use crate::error::{CliError, StageExt};
use crate::stages::{ensure_dir, read_rows, write_json, write_rows, CountRow, FrameSource};

#[derive(Debug, Parser)]
#[command(
    name = "soyscan",
    version,
    about = "Seed counting and yield estimation for soybean field plots"
)]
struct Cli {
    /// TOML configuration file with per-stage sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives strictly sequential execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Correct fisheye frames and centre-crop them.
    Undistort(UndistortArgs),
    /// Assign frames to plots by timestamp windows.
    Assign(AssignArgs),
    /// Pick ten representative frames per plot side.
    Sample(AssignArgs),
    /// Apply randomized sensor effects to images.
    Augment(AugmentArgs),
    /// Train the yield regression head.
    TrainYield(TrainArgs),
    /// Predict plot yields with a trained head.
    Predict(PredictArgs),
    /// Count seeds and score counts against ground truth.
    Count(CountArgs),
    /// Spatially adjust plot values with a moving grid.
    Adjust(AdjustArgs),
    /// Score genotype selections at top-fraction thresholds.
    Rank(RankArgs),
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct UndistortArgs {
    /// Image file or directory of .png/.fimg frames.
    #[arg(long, required_unless_present = "identity_check")]
    input: Option<PathBuf>,
    #[arg(long, required_unless_present = "identity_check")]
    output: Option<PathBuf>,
    /// Crop as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    crop: Option<(usize, usize)>,
    /// Check that the principal point maps to the output centre.
    #[arg(long)]
    identity_check: bool,
}

#[derive(Debug, Args)]
struct AssignArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    windows: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct FrameArgs {
    /// Sample manifest from `sample`.
    #[arg(long)]
    samples: PathBuf,
    /// Directory the manifest's frame paths are relative to (corrected frames).
    #[arg(long, default_value = ".")]
    frame_root: PathBuf,
    /// Directory of precomputed .fimg feature maps mirroring the frame paths.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    frames: FrameArgs,
    #[arg(long)]
    yields: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    output: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    loss: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    frames: FrameArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct CountArgs {
    /// Sample manifest; counts blobs in the sampled frames.
    #[arg(long, conflicts_with = "points", required_unless_present = "points")]
    samples: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    frame_root: PathBuf,
    /// Detector points CSV (image_id,x,y,confidence) to count instead.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Per-image counts output.
    #[arg(long)]
    output: PathBuf,
    /// Per-plot total seed counts output (with --samples).
    #[arg(long)]
    plot_output: Option<PathBuf>,
    /// Ground-truth counts CSV (id,count) for metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Metrics JSON output (with --truth).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// SVG scatter/residual plot (with --truth).
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Debug, Args)]
struct AdjustArgs {
    /// CSV of plot_id,range,pass,value.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// Score one confusion row: tp=..,tn=..,fp=..,fn=..
    #[arg(long, conflicts_with_all = ["truth", "predicted"])]
    confusion: Option<String>,
    /// True values, CSV of plot_id,range,pass,value.
    #[arg(long, requires = "predicted", required_unless_present = "confusion")]
    truth: Option<PathBuf>,
    /// Predicted values, same layout.
    #[arg(long, requires = "truth")]
    predicted: Option<PathBuf>,
    /// Rank raw values instead of spatially adjusted ones.
    #[arg(long)]
    raw: bool,
    /// Comma-separated top fractions.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Report JSON output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory for per-threshold set-membership CSVs.
    #[arg(long)]
    venn_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Generate a synthetic dataset and run on it.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    synth: bool,
    /// Directory with frames.csv, windows.csv and yields.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "soyscan_out")]
    output: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    raw: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(w)?, p(h)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    let seed = cfg.seed;

    match cli.command {
        Command::Undistort(a) => {
            if let Some(c) = a.crop {
                cfg.undistort.crop = c;
            }
            if a.identity_check {
                let off = stages::identity_check(&cfg)?;
                println!("identity-check offset={off:.6} px");
                if off > 0.0 {
                    return Err(CliError::new(
                        "domain",
                        "undistort",
                        format!("principal point moved by {off} px"),
                    ));
                }
                return Ok(());
            }
            let (input, output) = (a.input.unwrap_or_default(), a.output.unwrap_or_default());
            let s = stages::undistort_images(&cfg, &input, &output)?;
            println!(
                "undistort: {} frames, {} unresolved pixels",
                s.frames, s.unresolved_pixels
            );
        }
        Command::Assign(a) => {
            let asg = stages::assign(&a.frames, &a.windows, Some(&a.output))?;
            println!(
                "assign: {} plots, {} unassigned frames",
                asg.plots.len(),
                asg.unassigned.len()
            );
        }
        Command::Sample(a) => {
            let asg = stages::assign(&a.frames, &a.windows, None)?;
            let s = stages::sample(&asg, &a.output)?;
            println!("sample: {} plots", s.len());
        }
        Command::Augment(a) => {
            let n = stages::augment(&cfg, &a.input, &a.output, seed)?;
            println!("augment: {n} images");
        }
        Command::TrainYield(a) => {
            if let Some(e) = a.epochs {
                cfg.yield_model.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.yield_model.lr = lr;
            }
            cfg.validate()?;
            let samples = stages::read_samples(&a.frames.samples, "train-yield")?;
            let src = frame_source(&a.frames);
            let (loss, _) = stages::train_yield(
                &cfg,
                &samples,
                &a.yields,
                src,
                &a.output,
                a.loss.as_deref(),
                seed,
            )?;
            println!(
                "train-yield: {} plots, {} epochs, loss {:.6} -> {:.6}",
                samples.len(),
                loss.len(),
                loss.first().copied().unwrap_or(f64::NAN),
                loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Predict(a) => {
            let samples = stages::read_samples(&a.frames.samples, "predict")?;
            let preds = stages::predict(&cfg, &samples, frame_source(&a.frames), &a.model)?;
            write_rows(&a.output, &preds, "predict")?;
            println!("predict: {} plots", preds.len());
        }
        Command::Count(a) => count(&mut cfg, a)?,
        Command::Adjust(a) => {
            let res = stages::adjust_file(&a.input, &a.output, &cfg.spatial.mask())?;
            println!(
                "{}",
                serde_json::to_string(&AdjustmentSummary::from(&res)).stage("adjust")?
            );
        }
        Command::Rank(a) => rank(&cfg, a)?,
        Command::Synth(a) => {
            let spec = pipeline::synth_spec(&cfg, seed);
            let ds = synthfield::write_dataset(&a.output, &spec).stage("synth")?;
            println!(
                "synth: {} plots, {} frames",
                ds.truth.len(),
                ds.frames.len()
            );
        }
        Command::Pipeline(a) => {
            if let Some(e) = a.epochs {
                cfg.yield_model.epochs = e;
            }
            cfg.rank.raw |= a.raw;
            cfg.validate()?;
            let (input, run_cfg) = match a.data {
                Some(data_dir) => (pipeline::PipelineInput { data_dir }, cfg),
                None => pipeline::synth_input(&cfg, &a.output, seed)?,
            };
            let report = pipeline::run(&run_cfg, &input, &a.output, seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).stage("pipeline")?
            );
        }
    }
    Ok(())
}

fn frame_source(a: &FrameArgs) -> FrameSource<'_> {
    FrameSource {
        frame_root: &a.frame_root,
        features: a.features.as_deref(),
    }
}

fn count(cfg: &mut Config, a: CountArgs) -> Result<(), CliError> {
    if let Some(t) = a.threshold {
        cfg.count.threshold = t;
    }
    let (per_image, per_plot) = match (&a.samples, &a.points) {
        (Some(s), _) => {
            let samples = stages::read_samples(s, "count")?;
            let (f, p) = stages::count_frames(&samples, &a.frame_root, &cfg.count)?;
            (f, Some(p))
        }
        (None, Some(p)) => (stages::count_detections(p, &cfg.count)?, None),
        (None, None) => unreachable!("clap requires one input"),
    };
    write_rows(&a.output, &per_image, "count")?;
    if let (Some(path), Some(p)) = (&a.plot_output, &per_plot) {
        write_rows(path, p, "count")?;
    }
    println!("count: {} images", per_image.len());
    if let Some(truth) = &a.truth {
        let truth: Vec<CountRow> = read_rows(truth, "count")?;
        // Truth ids name plots when counting sampled frames, images otherwise.
        let est = match &per_plot {
            Some(p) if truth.iter().all(|t| p.iter().any(|r| r.id == t.id)) => p,
            _ => &per_image,
        };
        let (t, e, m) = stages::compare_counts(&truth, est)?;
        print!("{}", m.to_table());
        if let Some(path) = &a.metrics {
            write_json(path, &m, "count")?;
        }
        if let Some(path) = &a.svg {
            std::fs::write(path, svg::count_scatter(&t, &e)).stage("count")?;
        }
    }
    Ok(())
}

fn rank(cfg: &Config, a: RankArgs) -> Result<(), CliError> {
    if let Some(c) = &a.confusion {
        let s = scores(&stages::parse_confusion(c)?).stage("rank")?;
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        println!(
            "accuracy={:.4} sensitivity={} specificity={}",
            s.accuracy,
            opt(s.sensitivity),
            opt(s.specificity)
        );
        return Ok(());
    }
    let thresholds = a
        .thresholds
        .clone()
        .unwrap_or_else(|| cfg.rank.thresholds.clone());
    if thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(CliError::config("thresholds must lie in (0, 1]"));
    }
    let (truth, predicted) = (
        a.truth.as_deref().unwrap_or(Path::new("")),
        a.predicted.as_deref().unwrap_or(Path::new("")),
    );
    let reports = stages::rank_files(
        truth,
        predicted,
        &cfg.spatial.mask(),
        a.raw || cfg.rank.raw,
        &thresholds,
    )?;
    print!("{}", report_table(&reports));
    if let Some(out) = &a.output {
        write_json(out, &reports, "rank")?;
    }
    if let Some(dir) = &a.venn_dir {
        ensure_dir(dir, "rank")?;
        write_venn_sets(dir, &reports).stage("rank")?;
    }
    Ok(())
}
