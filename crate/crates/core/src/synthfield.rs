//! Synthetic ground truth: seed images with known positions, field trials
//! with known genotype, trend and noise components, and complete on-disk
//! datasets that the ingest stage can consume.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraIntrinsics, UndistortConfig};
use crate::counting::{PointSet, SeedPoint};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::ingest::{
    self, CameraSide, FrameRecord, PlotWindow, Row, RowSide, YieldRow, MOISTURE_BASIS,
};
use crate::spatial::{AdjustmentResult, FieldGrid, GridPlot};

const SEED_COLOR: [f32; 3] = [0.95, 0.85, 0.55];
const SOIL_TINT: [f32; 3] = [1.0, 0.8, 0.6];
const MAX_PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedImageOptions {
    pub width: usize,
    pub height: usize,
    /// Range of the semi-major axis in pixels.
    pub semi_major: (f64, f64),
    /// Range of the minor/major axis ratio.
    pub aspect: (f64, f64),
    /// Keep seeds at least two pixels apart so each is its own blob.
    pub non_overlap: bool,
}

impl Default for SeedImageOptions {
    fn default() -> Self {
        SeedImageOptions {
            width: 64,
            height: 64,
            semi_major: (2.0, 3.5),
            aspect: (0.6, 0.9),
            non_overlap: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    shade: f32,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let grain: Vec<f32> = (0..width * height)
        .map(|_| rng.random_range(0.0..0.03))
        .collect();
    Image::from_fn(width, height, 3, |x, y, c| {
        let wave = 0.015 * ((x as f64 * 0.31 + phase).sin() * (y as f64 * 0.23 - phase).cos());
        let v = 0.06 + wave as f32 + grain[y * width + x];
        v * SOIL_TINT[c]
    })
}

fn place_seeds(
    count: usize,
    opts: &SeedImageOptions,
    region: (f64, f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Ellipse>> {
    let (x0, y0, x1, y1) = region;
    let mut seeds: Vec<Ellipse> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let a = rng.random_range(opts.semi_major.0..=opts.semi_major.1);
            let b = (a * rng.random_range(opts.aspect.0..=opts.aspect.1)).max(1.2);
            let lo_x = x0 + a + 1.0;
            let hi_x = x1 - a - 2.0;
            let lo_y = y0 + a + 1.0;
            let hi_y = y1 - a - 2.0;
            if lo_x > hi_x || lo_y > hi_y {
                break;
            }
            let e = Ellipse {
                cx: rng.random_range(lo_x..=hi_x),
                cy: rng.random_range(lo_y..=hi_y),
                a,
                b,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                shade: rng.random_range(0.8..=1.0),
            };
            let clear = !opts.non_overlap
                || seeds
                    .iter()
                    .all(|o| (o.cx - e.cx).hypot(o.cy - e.cy) >= o.a + e.a + 2.0);
            if clear {
                seeds.push(e);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidInput(format!(
                "cannot place {count} separated seeds in a {:.0}x{:.0} region",
                x1 - x0,
                y1 - y0
            )));
        }
    }
    Ok(seeds)
}

fn paint(img: &mut Image, seeds: &[Ellipse]) {
    for e in seeds {
        let xs = (e.cx - e.a).floor().max(0.0) as usize
            ..=((e.cx + e.a).ceil() as usize).min(img.width() - 1);
        let ys = (e.cy - e.a).floor().max(0.0) as usize
            ..=((e.cy + e.a).ceil() as usize).min(img.height() - 1);
        for y in ys {
            for x in xs.clone() {
                if e.contains(x as f64, y as f64) {
                    for (c, col) in SEED_COLOR.iter().enumerate() {
                        img.set(x, y, c, col * e.shade);
                    }
                }
            }
        }
    }
}

/// Renders `count` bright elliptical seeds on a dark textured background and
/// returns the image with the true seed centres.
///
/// In non-overlap mode this fails when the seeds cannot all be placed.
pub fn gen_plot_images(
    count: usize,
    seed: u64,
    opts: &SeedImageOptions,
) -> Result<(Image, PointSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(opts.width, opts.height, &mut rng)?;
    let region = (0.0, 0.0, opts.width as f64, opts.height as f64);
    let seeds = place_seeds(count, opts, region, &mut rng)?;
    paint(&mut img, &seeds);
    Ok((img, points(format!("synthetic_{seed}"), &seeds, (0.0, 0.0))))
}

/// Two seeds whose centres are closer than either semi-minor axis, so they
/// render as a single connected blob.
pub fn gen_overlapping_pair(seed: u64, opts: &SeedImageOptions) -> Result<(Image, PointSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(opts.width, opts.height, &mut rng)?;
    let a = opts.semi_major.1.max(1.5);
    let (cx, cy) = (opts.width as f64 / 2.0, opts.height as f64 / 2.0);
    if opts.width as f64 <= 4.0 * a + 4.0 || opts.height as f64 <= 2.0 * a + 4.0 {
        return Err(Error::InvalidInput(
            "image too small for an overlapping pair".into(),
        ));
    }
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let d = 0.45 * a;
    let pair: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|sign| Ellipse {
            cx: cx + sign * d * c,
            cy: cy + sign * d * s,
            a,
            b: a,
            angle: 0.0,
            shade: 0.9,
        })
        .collect();
    paint(&mut img, &pair);
    Ok((img, points(format!("pair_{seed}"), &pair, (0.0, 0.0))))
}

fn points(image_id: String, seeds: &[Ellipse], offset: (f64, f64)) -> PointSet {
    PointSet {
        image_id,
        points: seeds
            .iter()
            .map(|e| SeedPoint {
                x: e.cx + offset.0,
                y: e.cy + offset.1,
                confidence: 1.0,
            })
            .collect(),
    }
}

/// Coefficients of a smooth environmental trend over normalised field
/// coordinates `u` (range) and `v` (pass), both spanning [-1, 1]:
/// `linear[0] u + linear[1] v + quadratic[0] u^2 + quadratic[1] v^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendSpec {
    pub linear: [f64; 2],
    pub quadratic: [f64; 2],
}

impl TrendSpec {
    pub fn linear_range(amplitude: f64) -> Self {
        TrendSpec {
            linear: [amplitude, 0.0],
            quadratic: [0.0; 2],
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.linear[0] * u
            + self.linear[1] * v
            + self.quadratic[0] * u * u
            + self.quadratic[1] * v * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub n_range: usize,
    pub n_pass: usize,
    /// Field-wide mean yield (t/ha).
    pub base: f64,
    pub genotype_sd: f64,
    pub trend: TrendSpec,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            n_range: 10,
            n_pass: 10,
            base: 3.5,
            genotype_sd: 0.4,
            trend: TrendSpec::default(),
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

/// A generated field and its latent decomposition, aligned with
/// `grid.plots()`: `value = base + genotype + trend + noise`.
#[derive(Debug, Clone)]
pub struct SyntheticField {
    pub grid: FieldGrid,
    pub base: f64,
    pub genotype: Vec<f64>,
    pub trend: Vec<f64>,
    pub noise: Vec<f64>,
}

pub fn gen_field(spec: &FieldSpec) -> Result<SyntheticField> {
    if spec.n_range == 0 || spec.n_pass == 0 {
        return Err(Error::InvalidInput(
            "field needs at least one range and one pass".into(),
        ));
    }
    let normal = |sd: f64| {
        Normal::new(0.0, sd)
            .map_err(|_| Error::InvalidInput(format!("standard deviation {sd} is invalid")))
    };
    let (g_dist, e_dist) = (normal(spec.genotype_sd)?, normal(spec.noise_sd)?);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let n = spec.n_range * spec.n_pass;
    let (mut genotype, mut trend, mut noise, mut values) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for r in 0..spec.n_range {
        for p in 0..spec.n_pass {
            let g = g_dist.sample(&mut rng);
            let e = e_dist.sample(&mut rng);
            let t = spec.trend.at(unit(r, spec.n_range), unit(p, spec.n_pass));
            genotype.push(g);
            trend.push(t);
            noise.push(e);
            values.push(spec.base + g + t + e);
        }
    }
    Ok(SyntheticField {
        grid: FieldGrid::from_rows(spec.n_range, spec.n_pass, &values)?,
        base: spec.base,
        genotype,
        trend,
        noise,
    })
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

impl SyntheticField {
    /// Fraction of trend variance removed by an adjustment: the residual trend
    /// of plot `i` is `trend_i + adjusted_i - value_i`.
    pub fn trend_reduction(&self, res: &AdjustmentResult) -> Result<f64> {
        let residual: Vec<f64> = self
            .grid
            .plots()
            .iter()
            .zip(&self.trend)
            .map(|(p, t)| {
                let adj = res.adjusted(&p.plot_id).ok_or_else(|| {
                    Error::InvalidInput(format!("plot {} was not adjusted", p.plot_id))
                })?;
                Ok(t + adj - p.value.unwrap_or(f64::NAN))
            })
            .collect::<Result<_>>()?;
        let base = variance(&self.trend);
        if base == 0.0 {
            return Err(Error::InvalidInput("field has no trend".into()));
        }
        Ok(1.0 - variance(&residual) / base)
    }

    /// `base + genotype` per plot id.
    pub fn genetic_values(&self) -> Vec<(String, f64)> {
        self.grid
            .plots()
            .iter()
            .zip(&self.genotype)
            .map(|(p, g)| (p.plot_id.clone(), self.base + g))
            .collect()
    }
}

/// Camera for synthetic frames: a small sensor with the principal point at
/// its centre and mild barrel distortion.
pub fn synthetic_camera() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 48.0,
        fy: 48.0,
        px: 64.0,
        py: 48.0,
        k: [-0.02, 0.002, 0.0, 0.0],
        width: 128,
        height: 96,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub field: FieldSpec,
    pub camera: CameraIntrinsics,
    /// Centre crop of corrected frames; seeds are only drawn inside it.
    pub crop: (usize, usize),
    /// Inclusive range of frames per row sequence.
    pub frames_per_sequence: (usize, usize),
    /// Mean seeds per frame for each t/ha of plot yield.
    pub seeds_per_t_ha: f64,
    pub area_m2: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            field: FieldSpec {
                n_range: 6,
                n_pass: 6,
                genotype_sd: 0.6,
                trend: TrendSpec {
                    linear: [0.4, -0.2],
                    quadratic: [0.0, 0.2],
                },
                ..FieldSpec::default()
            },
            camera: synthetic_camera(),
            crop: (48, 48),
            frames_per_sequence: (6, 14),
            seeds_per_t_ha: 2.0,
            area_m2: 4.6,
            seed: 0,
        }
    }
}

/// Per-plot latent truth written alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub plot_id: String,
    pub range: i64,
    pub pass: i64,
    pub genotype: f64,
    pub trend: f64,
    pub noise: f64,
    pub yield_t_ha: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub frames: Vec<FrameRecord>,
    pub windows: Vec<PlotWindow>,
    pub yields: Vec<YieldRow>,
    pub truth: Vec<TruthRow>,
    pub camera: CameraIntrinsics,
    pub crop: (usize, usize),
}

pub const COLLECTION_ID: &str = "synth";
const FRAME_STEP_MS: u64 = 100;

struct PlotFrames {
    frames: Vec<(FrameRecord, Image)>,
    windows: Vec<PlotWindow>,
    seeds: usize,
}

/// Plot `index` occupies a fixed time slot so plots can be generated in
/// parallel. Each row gets one window shared by both cameras, and a stray
/// frame is taken in the gap after each window.
fn gen_plot_frames(
    spec: &DatasetSpec,
    index: usize,
    plot: &GridPlot,
    yield_t_ha: f64,
) -> Result<PlotFrames> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let view = UndistortConfig {
        crop: spec.crop,
        ..UndistortConfig::default()
    }
    .resolve(&spec.camera)?;
    let (ox, oy) = camera::crop_offsets(view.width, view.height, spec.crop.0, spec.crop.1)?;
    let region = (
        ox as f64,
        oy as f64,
        (ox + spec.crop.0) as f64,
        (oy + spec.crop.1) as f64,
    );
    let opts = SeedImageOptions::default();

    let (lo, hi) = spec.frames_per_sequence;
    let slot = 2 * (hi as u64 + 2) * FRAME_STEP_MS;
    let mut out = PlotFrames {
        frames: Vec::new(),
        windows: Vec::new(),
        seeds: 0,
    };
    for (r, row) in [Row::One, Row::Two].into_iter().enumerate() {
        let start = (2 * index as u64 + r as u64) * slot + FRAME_STEP_MS;
        let stop = start + (hi as u64 + 1) * FRAME_STEP_MS;
        for side in [RowSide::A, RowSide::B] {
            out.windows.push(PlotWindow {
                plot_id: plot.plot_id.clone(),
                row,
                side,
                collection_id: COLLECTION_ID.into(),
                start_ms: start,
                stop_ms: stop,
            });
            let n = rng.random_range(lo..=hi);
            for k in 0..=n {
                // k == n is the stray frame just past the window
                let t = if k < n {
                    start + k as u64 * FRAME_STEP_MS
                } else {
                    stop + FRAME_STEP_MS / 2
                };
                let mean = spec.seeds_per_t_ha * yield_t_ha * rng.random_range(0.85..=1.15);
                let count = if k < n {
                    mean.round().max(0.0) as usize
                } else {
                    0
                };
                let mut pin = background(view.width, view.height, &mut rng)?;
                let seeds = place_seeds(count, &opts, region, &mut rng)?;
                paint(&mut pin, &seeds);
                out.seeds += count;
                let (fish, _) = camera::distort(&pin, &view, &spec.camera)?;
                let cam = side.camera();
                let name = match cam {
                    CameraSide::Left => "left",
                    CameraSide::Right => "right",
                };
                out.frames.push((
                    FrameRecord {
                        frame_path: format!("frames/{name}_{t:08}.png"),
                        timestamp_ms: t,
                        collection_id: COLLECTION_ID.into(),
                        camera_side: cam,
                    },
                    fish,
                ));
            }
        }
    }
    Ok(out)
}

/// Generates a complete dataset under `dir`: fisheye PNG frames, the
/// `frames.csv`, `windows.csv` and `yields.csv` manifests, `camera.json`
/// and the latent `truth.csv`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<SyntheticDataset> {
    let dir = dir.as_ref();
    if spec.frames_per_sequence.0 == 0 || spec.frames_per_sequence.0 > spec.frames_per_sequence.1 {
        return Err(Error::InvalidInput(format!(
            "frames per sequence range {:?} is invalid",
            spec.frames_per_sequence
        )));
    }
    let field = gen_field(&spec.field)?;
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let plots = field.grid.plots();
    let yields_t_ha: Vec<f64> = plots
        .iter()
        .map(|p| p.value.unwrap_or(0.0).max(0.5))
        .collect();
    let per_plot: Vec<PlotFrames> = plots
        .par_iter()
        .enumerate()
        .map(|(i, p)| gen_plot_frames(spec, i, p, yields_t_ha[i]))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::new();
    let mut windows = Vec::new();
    let mut yields = Vec::new();
    let mut truth = Vec::new();
    for (i, (p, pf)) in plots.iter().zip(per_plot).enumerate() {
        for (rec, img) in &pf.frames {
            img.save_png(dir.join(&rec.frame_path))?;
        }
        frames.extend(pf.frames.into_iter().map(|(r, _)| r));
        windows.extend(pf.windows);
        let moisture_pct: f64 = rng.random_range(10.0..18.0);
        let y = yields_t_ha[i];
        yields.push(YieldRow {
            plot_id: p.plot_id.clone(),
            range: p.range,
            pass: p.pass,
            mass_kg: y * spec.area_m2 / 10.0 * (1.0 - MOISTURE_BASIS)
                / (1.0 - moisture_pct / 100.0),
            moisture_pct,
            area_m2: spec.area_m2,
            quality: None,
        });
        truth.push(TruthRow {
            plot_id: p.plot_id.clone(),
            range: p.range,
            pass: p.pass,
            genotype: field.genotype[i],
            trend: field.trend[i],
            noise: field.noise[i],
            yield_t_ha: y,
            seeds: pf.seeds,
        });
    }
    frames.sort_by(|a, b| (a.timestamp_ms, &a.frame_path).cmp(&(b.timestamp_ms, &b.frame_path)));
    ingest::write_frames(dir.join("frames.csv"), &frames)?;
    ingest::write_windows(dir.join("windows.csv"), &windows)?;
    ingest::write_yields(dir.join("yields.csv"), &yields)?;
    ingest::write_csv(&dir.join("truth.csv"), &truth)?;
    let cam_path = dir.join("camera.json");
    std::fs::write(&cam_path, serde_json::to_string_pretty(&spec.camera)?)
        .map_err(|e| Error::io(&cam_path, e))?;
    Ok(SyntheticDataset {
        frames,
        windows,
        yields,
        truth,
        camera: spec.camera,
        crop: spec.crop,
    })
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRow>> {
    ingest::read_csv(path.as_ref())
}

/// Truth rows keyed by plot id.
pub fn truth_by_plot(truth: &[TruthRow]) -> BTreeMap<&str, &TruthRow> {
    truth.iter().map(|t| (t.plot_id.as_str(), t)).collect()
}
