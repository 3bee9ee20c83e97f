//! End-to-end run: assign, sample, correct, count, train, predict, adjust, rank.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use soyscan::camera::correct_frame;
use soyscan::ingest::PlotYieldRecord;
use soyscan::ranking::{evaluate_selection, report_table, write_venn_sets, SelectionReport};
use soyscan::sampler::{read_sample_manifest, SampledPaths};
use soyscan::spatial::AdjustmentSummary;
use soyscan::synthfield::{self, DatasetSpec};
use soyscan::Image;

use crate::config::Config;
use crate::error::{CliError, StageExt};
use crate::stages::{self, ensure_dir, write_json, write_rows, FrameSource};

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub plots: usize,
    pub frames: usize,
    pub unassigned_frames: usize,
    pub unresolved_pixels: usize,
    pub final_training_loss: Option<f64>,
    pub ranked_on: &'static str,
    pub spatial: BTreeMap<&'static str, AdjustmentSummary>,
    pub tsc: Vec<SelectionReport>,
    #[serde(rename = "yield")]
    pub yield_estimate: Vec<SelectionReport>,
}

/// Inputs of a run: a directory holding `frames.csv`, `windows.csv` and
/// `yields.csv`, with frame paths relative to it.
pub struct PipelineInput {
    pub data_dir: PathBuf,
}

/// Generates a synthetic dataset under `out/data` and returns its location
/// together with the configuration adapted to its camera and crop.
pub fn synth_input(
    cfg: &Config,
    out: &Path,
    seed: u64,
) -> Result<(PipelineInput, Config), CliError> {
    let data_dir = out.join("data");
    let spec = synth_spec(cfg, seed);
    let ds = synthfield::write_dataset(&data_dir, &spec).stage("synth")?;
    let mut cfg = cfg.clone();
    cfg.camera = ds.camera;
    cfg.undistort.crop = ds.crop;
    Ok((PipelineInput { data_dir }, cfg))
}

pub fn synth_spec(cfg: &Config, seed: u64) -> DatasetSpec {
    let mut spec = cfg.synth;
    spec.seed = seed;
    spec.field.seed = seed;
    spec
}

pub fn run(
    cfg: &Config,
    input: &PipelineInput,
    out: &Path,
    seed: u64,
) -> Result<PipelineReport, CliError> {
    ensure_dir(out, "pipeline")?;
    let data = &input.data_dir;

    let assignment = stages::assign(
        &data.join("frames.csv"),
        &data.join("windows.csv"),
        Some(&out.join("assignment.csv")),
    )?;
    let frames = assignment
        .plots
        .values()
        .map(|p| p.frame_count())
        .sum::<usize>()
        + assignment.unassigned.len();
    eprintln!(
        "assign: {} plots, {} frames, {} unassigned",
        assignment.plots.len(),
        frames,
        assignment.unassigned.len()
    );

    let manifest = out.join("samples.csv");
    stages::sample(&assignment, &manifest)?;
    let samples = read_sample_manifest(&manifest).stage("sample")?;

    let records = stages::yield_records(&data.join("yields.csv"), "pipeline")?;
    let sampled: BTreeSet<&str> = samples.iter().map(|s| s.plot_id.as_str()).collect();
    let recorded: BTreeSet<&str> = records.iter().map(|r| r.plot_id.as_str()).collect();
    if sampled != recorded {
        let missing: Vec<&&str> = sampled.symmetric_difference(&recorded).take(5).collect();
        return Err(CliError::new(
            "invalid_input",
            "pipeline",
            format!("imaged plots and yield records differ, e.g. {missing:?}"),
        ));
    }

    let corrected = out.join("corrected");
    let unresolved = correct_sampled(cfg, &samples, data, &corrected)?;
    eprintln!("undistort: {unresolved} unresolved pixels");

    let (frame_counts, tsc) = stages::count_frames(&samples, &corrected, &cfg.count)?;
    write_rows(&out.join("frame_counts.csv"), &frame_counts, "count")?;
    write_rows(&out.join("tsc.csv"), &tsc, "count")?;

    let src = FrameSource {
        frame_root: &corrected,
        features: None,
    };
    let (loss, preds) = stages::train_yield(
        cfg,
        &samples,
        &data.join("yields.csv"),
        src,
        &out.join("model.ywts"),
        Some(&out.join("loss.csv")),
        seed,
    )?;
    eprintln!(
        "train-yield: final loss {:.6}",
        loss.last().copied().unwrap_or(f64::NAN)
    );
    write_rows(&out.join("predictions.csv"), &preds, "predict")?;

    let tsc_by: BTreeMap<&str, f64> = tsc.iter().map(|r| (r.id.as_str(), r.count)).collect();
    let pred_by: BTreeMap<&str, f64> = preds
        .iter()
        .map(|p| (p.plot_id.as_str(), p.estimated_yield))
        .collect();
    let mut records: Vec<PlotYieldRecord> = records;
    for r in &mut records {
        r.estimated_tsc = tsc_by.get(r.plot_id.as_str()).copied();
        r.estimated_yield = pred_by.get(r.plot_id.as_str()).copied();
    }

    let mask = cfg.spatial.mask();
    let mut spatial = BTreeMap::new();
    let truth_adj = stages::adjust_grid(
        &stages::grid_from(&records, |r| Some(r.yield_t_ha), "adjust")?,
        &mask,
        "adjust",
    )?;
    let tsc_adj = stages::adjust_grid(
        &stages::grid_from(&records, |r| r.estimated_tsc, "adjust")?,
        &mask,
        "adjust",
    )?;
    let est_adj = stages::adjust_grid(
        &stages::grid_from(&records, |r| r.estimated_yield, "adjust")?,
        &mask,
        "adjust",
    )?;
    for r in &mut records {
        r.adjusted_yield = truth_adj.adjusted(&r.plot_id);
        r.adjusted_tsc = tsc_adj.adjusted(&r.plot_id);
        r.adjusted_estimated_yield = est_adj.adjusted(&r.plot_id);
    }
    spatial.insert("yield", AdjustmentSummary::from(&truth_adj));
    spatial.insert("tsc", AdjustmentSummary::from(&tsc_adj));
    spatial.insert("estimated_yield", AdjustmentSummary::from(&est_adj));
    write_rows(&out.join("plots.csv"), &records, "adjust")?;

    let raw = cfg.rank.raw;
    let pick = |f: fn(&PlotYieldRecord) -> Option<f64>| -> Vec<(String, f64)> {
        records
            .iter()
            .filter_map(|r| f(r).map(|v| (r.plot_id.clone(), v)))
            .collect()
    };
    let (truth, tsc_v, est_v) = if raw {
        (
            pick(|r| Some(r.yield_t_ha)),
            pick(|r| r.estimated_tsc),
            pick(|r| r.estimated_yield),
        )
    } else {
        (
            pick(|r| r.adjusted_yield),
            pick(|r| r.adjusted_tsc),
            pick(|r| r.adjusted_estimated_yield),
        )
    };
    let th = &cfg.rank.thresholds;
    let tsc_report = evaluate_selection(&truth, &tsc_v, th).stage("rank")?;
    let yield_report = evaluate_selection(&truth, &est_v, th).stage("rank")?;
    for (name, rep) in [("tsc", &tsc_report), ("yield", &yield_report)] {
        let dir = out.join("venn").join(name);
        ensure_dir(&dir, "rank")?;
        write_venn_sets(&dir, rep).stage("rank")?;
        eprintln!("rank ({name}):\n{}", report_table(rep));
    }

    let report = PipelineReport {
        plots: records.len(),
        frames,
        unassigned_frames: assignment.unassigned.len(),
        unresolved_pixels: unresolved,
        final_training_loss: loss.last().copied(),
        ranked_on: if raw { "raw" } else { "adjusted" },
        spatial,
        tsc: tsc_report,
        yield_estimate: yield_report,
    };
    write_json(&out.join("report.json"), &report, "pipeline")?;
    Ok(report)
}

/// Undistorts and crops each distinct sampled frame into `dest`, mirroring
/// its relative path.
fn correct_sampled(
    cfg: &Config,
    samples: &[SampledPaths],
    data: &Path,
    dest: &Path,
) -> Result<usize, CliError> {
    const STAGE: &str = "undistort";
    let paths: BTreeSet<&String> = samples
        .iter()
        .flat_map(|s| s.side_a.iter().chain(&s.side_b))
        .collect();
    let paths: Vec<&String> = paths.into_iter().collect();
    let unresolved = paths
        .par_iter()
        .map(|p| {
            let img = Image::load(data.join(p)).stage(STAGE)?;
            let res = correct_frame(&img, &cfg.camera, &cfg.undistort).stage(STAGE)?;
            let target = dest.join(p);
            if let Some(parent) = target.parent() {
                ensure_dir(parent, STAGE)?;
            }
            res.image.save(&target).stage(STAGE)?;
            Ok(res.unresolved_pixels)
        })
        .collect::<Result<Vec<usize>, CliError>>()?;
    Ok(unresolved.iter().sum())
}
