//! One function per subcommand. Each reads its declared inputs and writes its
//! declared outputs; printing is left to the caller.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use soyscan::augment::{apply_effects, sample_params_in};
use soyscan::camera::{correct_frame, undistort, UndistortConfig};
use soyscan::counting::{blob_count, count_metrics, count_points, read_points, CountMetrics};
use soyscan::ingest::{self, Assignment, PlotYieldRecord};
use soyscan::ranking::{evaluate_selection, ConfusionCounts, SelectionReport};
use soyscan::sampler::{
    read_sample_manifest, sample_plot, write_sample_manifest, PlotSample, SampledPaths,
};
use soyscan::spatial::{
    adjust, read_grid, write_adjusted, AdjustmentResult, FieldGrid, GridMask, GridPlot,
};
use soyscan::tensornet::{Real, Tensor};
use soyscan::yieldnet::{
    extract_and_fuse, fuse, load_feature_map, train_on_fused, PlotImages, ReferenceExtractor,
    RegressorConfig, TrainOutput, YieldRegressor,
};
use soyscan::Image;

use crate::config::{Config, CountConfig, Precision};
use crate::error::{CliError, StageExt};

pub fn read_rows<T: DeserializeOwned>(
    path: &Path,
    stage: &'static str,
) -> Result<Vec<T>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .stage(stage)?;
    rdr.deserialize()
        .collect::<csv::Result<Vec<T>>>()
        .stage(stage)
}

pub fn write_rows<T: Serialize>(
    path: &Path,
    rows: &[T],
    stage: &'static str,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).stage(stage)?;
    for r in rows {
        w.serialize(r).stage(stage)?;
    }
    w.flush().stage(stage)
}

pub fn write_json<T: Serialize>(
    path: &Path,
    value: &T,
    stage: &'static str,
) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).stage(stage)?;
    text.push('\n');
    std::fs::write(path, text).stage(stage)
}

pub fn ensure_dir(path: &Path, stage: &'static str) -> Result<(), CliError> {
    std::fs::create_dir_all(path).stage(stage)
}

fn ensure_parent(path: &Path, stage: &'static str) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p, stage),
        _ => Ok(()),
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "fimg"))
}

/// A single image file, or every `.png`/`.fimg` file of a directory in name order.
pub fn list_images(input: &Path, stage: &'static str) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(input)
        .stage(stage)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::new(
            "invalid_input",
            stage,
            format!("no images under {}", input.display()),
        ));
    }
    Ok(out)
}

/// Undistorts a probe with one lit pixel at the principal point and returns
/// the distance (px) between the brightest output pixel and the view centre.
pub fn identity_check(cfg: &Config) -> Result<f64, CliError> {
    const STAGE: &str = "undistort";
    let cam = &cfg.camera;
    let probe_cfg = UndistortConfig {
        crop: (0, 0),
        ..cfg.undistort
    };
    let view = probe_cfg.resolve(cam).stage(STAGE)?;
    let mut probe = Image::new(cam.width, cam.height, 3).stage(STAGE)?;
    let (px, py) = (cam.px.round() as usize, cam.py.round() as usize);
    if px >= cam.width || py >= cam.height {
        return Err(CliError::new(
            "invalid_input",
            STAGE,
            "principal point lies outside the sensor",
        ));
    }
    for c in 0..3 {
        probe.set(px, py, c, 1.0);
    }
    let out = undistort(&probe, cam, &probe_cfg).stage(STAGE)?.image;
    let luma = out.luma();
    let (best, _) =
        luma.iter().enumerate().fold(
            (0, f32::MIN),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
    let (bx, by) = ((best % out.width()) as f64, (best / out.width()) as f64);
    Ok((bx - view.cx.round()).hypot(by - view.cy.round()))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UndistortSummary {
    pub frames: usize,
    pub unresolved_pixels: usize,
}

pub fn undistort_images(
    cfg: &Config,
    input: &Path,
    output: &Path,
) -> Result<UndistortSummary, CliError> {
    const STAGE: &str = "undistort";
    let files = list_images(input, STAGE)?;
    ensure_dir(output, STAGE)?;
    let unresolved = files
        .par_iter()
        .map(|f| {
            let img = Image::load(f).stage(STAGE)?;
            let res = correct_frame(&img, &cfg.camera, &cfg.undistort).stage(STAGE)?;
            res.image
                .save(output.join(f.file_name().unwrap_or_default()))
                .stage(STAGE)?;
            Ok(res.unresolved_pixels)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(UndistortSummary {
        frames: files.len(),
        unresolved_pixels: unresolved.iter().sum(),
    })
}

pub fn assign(
    frames: &Path,
    windows: &Path,
    output: Option<&Path>,
) -> Result<Assignment, CliError> {
    const STAGE: &str = "assign";
    let f = ingest::read_frames(frames).stage(STAGE)?;
    let w = ingest::read_windows(windows).stage(STAGE)?;
    let a = ingest::assign_frames(&f, &w).stage(STAGE)?;
    if let Some(out) = output {
        ensure_parent(out, STAGE)?;
        ingest::write_assignment(out, &a).stage(STAGE)?;
    }
    Ok(a)
}

pub fn sample(assignment: &Assignment, output: &Path) -> Result<Vec<PlotSample>, CliError> {
    const STAGE: &str = "sample";
    let samples = assignment
        .plots
        .values()
        .map(sample_plot)
        .collect::<soyscan::Result<Vec<_>>>()
        .stage(STAGE)?;
    ensure_parent(output, STAGE)?;
    write_sample_manifest(output, &samples).stage(STAGE)?;
    Ok(samples)
}

/// Applies independently drawn sensor effects to each image. Per-image seeds
/// are drawn in name order from `seed`.
pub fn augment(cfg: &Config, input: &Path, output: &Path, seed: u64) -> Result<usize, CliError> {
    const STAGE: &str = "augment";
    let files = list_images(input, STAGE)?;
    ensure_dir(output, STAGE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = files.iter().map(|_| rng.next_u64()).collect();
    files.par_iter().zip(&seeds).try_for_each(|(f, &s)| {
        let img = Image::load(f).stage(STAGE)?;
        let params = sample_params_in(s, &cfg.augment);
        let out = apply_effects(&img, &params).stage(STAGE)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let ext = f.extension().and_then(|s| s.to_str()).unwrap_or("png");
        out.save(output.join(format!("{stem}_aug.{ext}")))
            .stage(STAGE)?;
        write_json(&output.join(format!("{stem}_aug.json")), &params, STAGE)
    })?;
    Ok(files.len())
}

/// Where the frames (or imported feature maps) of a sample manifest live.
#[derive(Debug, Clone, Copy)]
pub struct FrameSource<'a> {
    pub frame_root: &'a Path,
    /// Directory of precomputed `.fimg` feature maps mirroring the frame paths.
    pub features: Option<&'a Path>,
}

fn load_plot_images(
    s: &SampledPaths,
    root: &Path,
    stage: &'static str,
) -> Result<PlotImages, CliError> {
    let load = |paths: &[String]| -> Result<Vec<Image>, CliError> {
        paths
            .par_iter()
            .map(|p| Image::load(root.join(p)).stage(stage))
            .collect()
    };
    Ok(PlotImages {
        side_a: load(&s.side_a)?,
        side_b: load(&s.side_b)?,
    })
}

fn fused_map<T: Real>(
    s: &SampledPaths,
    src: FrameSource,
    extractor: &ReferenceExtractor<T>,
    stage: &'static str,
) -> Result<Tensor<T>, CliError> {
    match src.features {
        Some(dir) => {
            let load = |paths: &[String]| -> Result<Vec<Tensor<T>>, CliError> {
                paths
                    .iter()
                    .map(|p| load_feature_map(dir.join(p).with_extension("fimg")).stage(stage))
                    .collect()
            };
            fuse(&load(&s.side_a)?, &load(&s.side_b)?).stage(stage)
        }
        None => {
            extract_and_fuse(extractor, &load_plot_images(s, src.frame_root, stage)?).stage(stage)
        }
    }
}

fn yield_targets(
    yields: &Path,
    stage: &'static str,
) -> Result<BTreeMap<String, PlotYieldRecord>, CliError> {
    ingest::read_yields(yields)
        .stage(stage)?
        .iter()
        .map(|r| PlotYieldRecord::from_row(r).map(|rec| (rec.plot_id.clone(), rec)))
        .collect::<soyscan::Result<_>>()
        .stage(stage)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub plot_id: String,
    pub estimated_yield: f64,
}

fn train_with<T: Real>(
    cfg: &Config,
    samples: &[SampledPaths],
    targets: &BTreeMap<String, PlotYieldRecord>,
    src: FrameSource,
    seed: u64,
) -> Result<(TrainOutput<T>, Vec<PredictionRow>), CliError> {
    const STAGE: &str = "train-yield";
    let y = &cfg.yield_model;
    let extractor = ReferenceExtractor::<T>::new(y.feature_channels, y.extractor_seed);
    let data: Vec<(Tensor<T>, f64)> = samples
        .iter()
        .map(|s| {
            let t = targets.get(&s.plot_id).ok_or_else(|| {
                CliError::new(
                    "invalid_input",
                    STAGE,
                    format!("plot {} has no yield record", s.plot_id),
                )
            })?;
            Ok((fused_map(s, src, &extractor, STAGE)?, t.yield_t_ha))
        })
        .collect::<Result<_, CliError>>()?;
    let Some((first, _)) = data.first() else {
        return Err(CliError::new(
            "invalid_input",
            STAGE,
            "no plots to train on",
        ));
    };
    let [c, h, w] = *first.shape() else {
        return Err(CliError::new("shape", STAGE, "fused maps must be 3-D"));
    };
    let init = YieldRegressor::new(RegressorConfig::for_input(c, h, w), seed).stage(STAGE)?;
    let out = train_on_fused(init, &data, &y.train_config(seed)).stage(STAGE)?;
    let preds = samples
        .iter()
        .zip(&data)
        .map(|(s, (x, _))| {
            Ok(PredictionRow {
                plot_id: s.plot_id.clone(),
                estimated_yield: out.regressor.predict_fused(x).stage(STAGE)?,
            })
        })
        .collect::<Result<_, CliError>>()?;
    Ok((out, preds))
}

fn save_training<T: Real>(
    out: &TrainOutput<T>,
    model: &Path,
    loss: Option<&Path>,
) -> Result<Vec<f64>, CliError> {
    const STAGE: &str = "train-yield";
    ensure_parent(model, STAGE)?;
    out.regressor.save(model).stage(STAGE)?;
    if let Some(loss) = loss {
        let rows: Vec<LossRow> = out
            .loss_history
            .iter()
            .enumerate()
            .map(|(i, &l)| LossRow {
                epoch: i + 1,
                loss: l,
            })
            .collect();
        write_rows(loss, &rows, STAGE)?;
    }
    Ok(out.loss_history.clone())
}

/// Trains the regression head on every sampled plot, saves the checkpoint
/// and loss curve, and returns the loss history with in-sample predictions.
pub fn train_yield(
    cfg: &Config,
    samples: &[SampledPaths],
    yields: &Path,
    src: FrameSource,
    model: &Path,
    loss: Option<&Path>,
    seed: u64,
) -> Result<(Vec<f64>, Vec<PredictionRow>), CliError> {
    let targets = yield_targets(yields, "train-yield")?;
    match cfg.yield_model.precision {
        Precision::F64 => {
            let (out, preds) = train_with::<f64>(cfg, samples, &targets, src, seed)?;
            Ok((save_training(&out, model, loss)?, preds))
        }
        Precision::F32 => {
            let (out, preds) = train_with::<f32>(cfg, samples, &targets, src, seed)?;
            Ok((save_training(&out, model, loss)?, preds))
        }
    }
}

fn predict_with<T: Real>(
    cfg: &Config,
    samples: &[SampledPaths],
    src: FrameSource,
    model: &Path,
) -> Result<Vec<PredictionRow>, CliError> {
    const STAGE: &str = "predict";
    let reg = YieldRegressor::<T>::load(model).stage(STAGE)?;
    let extractor = ReferenceExtractor::<T>::new(
        cfg.yield_model.feature_channels,
        cfg.yield_model.extractor_seed,
    );
    samples
        .iter()
        .map(|s| {
            let x = fused_map(s, src, &extractor, STAGE)?;
            Ok(PredictionRow {
                plot_id: s.plot_id.clone(),
                estimated_yield: reg.predict_fused(&x).stage(STAGE)?,
            })
        })
        .collect()
}

pub fn predict(
    cfg: &Config,
    samples: &[SampledPaths],
    src: FrameSource,
    model: &Path,
) -> Result<Vec<PredictionRow>, CliError> {
    match cfg.yield_model.precision {
        Precision::F64 => predict_with::<f64>(cfg, samples, src, model),
        Precision::F32 => predict_with::<f32>(cfg, samples, src, model),
    }
}

pub fn read_samples(path: &Path, stage: &'static str) -> Result<Vec<SampledPaths>, CliError> {
    read_sample_manifest(path).stage(stage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub id: String,
    pub count: f64,
}

/// Blob counts of every distinct sampled frame, and per-plot total seed
/// counts summed over all twenty sample slots.
pub fn count_frames(
    samples: &[SampledPaths],
    root: &Path,
    cc: &CountConfig,
) -> Result<(Vec<CountRow>, Vec<CountRow>), CliError> {
    const STAGE: &str = "count";
    let paths: BTreeSet<&String> = samples
        .iter()
        .flat_map(|s| s.side_a.iter().chain(&s.side_b))
        .collect();
    let paths: Vec<&String> = paths.into_iter().collect();
    let counts = paths
        .par_iter()
        .map(|p| {
            let img = Image::load(root.join(p)).stage(STAGE)?;
            Ok(blob_count(&img, cc.threshold, cc.min_area))
        })
        .collect::<Result<Vec<usize>, CliError>>()?;
    let by_path: BTreeMap<&String, usize> = paths.iter().copied().zip(counts).collect();
    let frames = by_path
        .iter()
        .map(|(p, &c)| CountRow {
            id: (*p).clone(),
            count: c as f64,
        })
        .collect();
    let plots = samples
        .iter()
        .map(|s| CountRow {
            id: s.plot_id.clone(),
            count: s
                .side_a
                .iter()
                .chain(&s.side_b)
                .map(|p| by_path[p])
                .sum::<usize>() as f64,
        })
        .collect();
    Ok((frames, plots))
}

/// Detector point counts per image at the configured confidence.
pub fn count_detections(points: &Path, cc: &CountConfig) -> Result<Vec<CountRow>, CliError> {
    let sets = read_points(points).stage("count")?;
    Ok(sets
        .iter()
        .map(|ps| CountRow {
            id: ps.image_id.clone(),
            count: count_points(ps, cc.confidence) as f64,
        })
        .collect())
}

/// Metrics of `estimates` against truth rows, matched by id.
pub fn compare_counts(
    truth: &[CountRow],
    estimates: &[CountRow],
) -> Result<(Vec<f64>, Vec<f64>, CountMetrics), CliError> {
    const STAGE: &str = "count";
    let est: BTreeMap<&str, f64> = estimates.iter().map(|r| (r.id.as_str(), r.count)).collect();
    let (mut t, mut e) = (Vec::new(), Vec::new());
    for r in truth {
        let v = est.get(r.id.as_str()).ok_or_else(|| {
            CliError::new("invalid_input", STAGE, format!("no estimate for {}", r.id))
        })?;
        t.push(r.count);
        e.push(*v);
    }
    let m = count_metrics(&t, &e).stage(STAGE)?;
    Ok((t, e, m))
}

pub fn adjust_grid(
    grid: &FieldGrid,
    mask: &GridMask,
    stage: &'static str,
) -> Result<AdjustmentResult, CliError> {
    adjust(grid, mask).stage(stage)
}

pub fn adjust_file(
    input: &Path,
    output: &Path,
    mask: &GridMask,
) -> Result<AdjustmentResult, CliError> {
    const STAGE: &str = "adjust";
    let grid = read_grid(input).stage(STAGE)?;
    let res = adjust_grid(&grid, mask, STAGE)?;
    ensure_parent(output, STAGE)?;
    write_adjusted(output, &res).stage(STAGE)?;
    Ok(res)
}

/// Parses `tp=..,tn=..,fp=..,fn=..` in any order.
pub fn parse_confusion(s: &str) -> Result<ConfusionCounts, CliError> {
    let bad = |m: String| CliError::new("invalid_input", "rank", m);
    let mut vals: BTreeMap<&str, usize> = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
        let k = k.trim();
        if !matches!(k, "tp" | "tn" | "fp" | "fn") {
            return Err(bad(format!("unknown confusion key {k:?}")));
        }
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| bad(format!("{k}: {v:?} is not a count")))?;
        if vals.insert(k, v).is_some() {
            return Err(bad(format!("{k} given twice")));
        }
    }
    let get = |k: &str| {
        vals.get(k)
            .copied()
            .ok_or_else(|| bad(format!("missing {k}")))
    };
    Ok(ConfusionCounts::new(
        get("tp")?,
        get("tn")?,
        get("fp")?,
        get("fn")?,
    ))
}

/// Values to rank: the adjusted ones unless `raw`.
pub fn ranking_values(
    grid: &FieldGrid,
    mask: &GridMask,
    raw: bool,
    stage: &'static str,
) -> Result<Vec<(String, f64)>, CliError> {
    if raw {
        return Ok(grid
            .plots()
            .iter()
            .filter_map(|p| p.value.map(|v| (p.plot_id.clone(), v)))
            .collect());
    }
    Ok(adjust_grid(grid, mask, stage)?
        .plots
        .into_iter()
        .filter_map(|p| p.adjusted.map(|v| (p.plot_id, v)))
        .collect())
}

pub fn rank_files(
    truth: &Path,
    predicted: &Path,
    mask: &GridMask,
    raw: bool,
    thresholds: &[f64],
) -> Result<Vec<SelectionReport>, CliError> {
    const STAGE: &str = "rank";
    let t = ranking_values(&read_grid(truth).stage(STAGE)?, mask, raw, STAGE)?;
    let p = ranking_values(&read_grid(predicted).stage(STAGE)?, mask, raw, STAGE)?;
    evaluate_selection(&t, &p, thresholds).stage(STAGE)
}

/// Builds a grid from per-plot values using the field layout of `records`.
pub fn grid_from(
    records: &[PlotYieldRecord],
    value: impl Fn(&PlotYieldRecord) -> Option<f64>,
    stage: &'static str,
) -> Result<FieldGrid, CliError> {
    FieldGrid::new(
        records
            .iter()
            .map(|r| GridPlot {
                plot_id: r.plot_id.clone(),
                range: r.range,
                pass: r.pass,
                value: value(r),
            })
            .collect(),
    )
    .stage(stage)
}

pub fn yield_records(yields: &Path, stage: &'static str) -> Result<Vec<PlotYieldRecord>, CliError> {
    Ok(yield_targets(yields, stage)?.into_values().collect())
}
