//! Seed counts from point detections, a connected-component reference
//! counter, and count accuracy metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedPoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Seed detections of one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointSet {
    pub image_id: String,
    pub points: Vec<SeedPoint>,
}

impl PointSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        PointSet {
            image_id: image_id.into(),
            points: Vec::new(),
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
            if !inside || !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::InvalidInput(format!(
                    "point {p:?} of image {} is outside {width}x{height} or has bad confidence",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Number of detections with `confidence >= threshold`.
pub fn count_points(ps: &PointSet, threshold: f64) -> usize {
    ps.points
        .iter()
        .filter(|p| p.confidence >= threshold)
        .count()
}

/// Total seed count of a plot: the sum of per-image counts.
pub fn total_seed_count(counts: impl IntoIterator<Item = usize>) -> usize {
    counts.into_iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub area: usize,
    /// Intensity-weighted centroid `(x, y)`.
    pub centroid: [f64; 2],
    /// Top-left pixel in scan order.
    pub anchor: (usize, usize),
}

/// 8-connected components of pixels whose luma exceeds `threshold`, in
/// raster order of their first pixel.
pub fn connected_blobs(img: &Image, threshold: f32) -> Vec<Blob> {
    let (w, h) = (img.width(), img.height());
    let luma = img.luma();
    let mut label = vec![u32::MAX; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if luma[start] <= threshold || label[start] != u32::MAX {
            continue;
        }
        let id = blobs.len() as u32;
        label[start] = id;
        stack.push(start);
        let (mut area, mut sw, mut sx, mut sy) = (0usize, 0f64, 0f64, 0f64);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let v = luma[i] as f64;
            area += 1;
            sw += v;
            sx += v * x as f64;
            sy += v * y as f64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if luma[j] > threshold && label[j] == u32::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        blobs.push(Blob {
            area,
            centroid: [sx / sw, sy / sw],
            anchor: (start % w, start / w),
        });
    }
    blobs
}

/// Luma threshold separating bright seeds from the dark background.
pub const DEFAULT_BLOB_THRESHOLD: f32 = 0.35;

/// Number of 8-connected above-threshold components with at least `min_area` pixels.
pub fn blob_count(img: &Image, threshold: f32, min_area: usize) -> usize {
    connected_blobs(img, threshold)
        .iter()
        .filter(|b| b.area >= min_area)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    /// Percent; absent when computed without MAPE.
    pub mape: Option<f64>,
    /// Absent when the truth has no variance.
    pub r2: Option<f64>,
    /// `estimate - truth` per sample.
    pub residuals: Vec<f64>,
}

fn metrics(truth: &[f64], est: &[f64], with_mape: bool) -> Result<CountMetrics> {
    if truth.len() != est.len() {
        return Err(Error::Shape(format!(
            "{} truth values against {} estimates",
            truth.len(),
            est.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::InvalidInput(
            "count metrics need at least two samples".into(),
        ));
    }
    if with_mape {
        if let Some(i) = truth.iter().position(|&t| t == 0.0) {
            return Err(Error::Domain(format!(
                "MAPE undefined: truth value {i} is zero"
            )));
        }
    }
    let n = truth.len() as f64;
    let residuals: Vec<f64> = est.iter().zip(truth).map(|(e, t)| e - t).collect();
    let mse = residuals.iter().map(|r| r * r).sum::<f64>() / n;
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / n;
    let mape = with_mape.then(|| {
        100.0
            * residuals
                .iter()
                .zip(truth)
                .map(|(r, t)| (r / t).abs())
                .sum::<f64>()
            / n
    });
    let mean_t = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean_t).powi(2)).sum();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(CountMetrics {
        n: truth.len(),
        mse,
        mae,
        mape,
        r2,
        residuals,
    })
}

/// MSE, MAE, MAPE (percent), R² and residuals of `est` against `truth`.
pub fn count_metrics(truth: &[f64], est: &[f64]) -> Result<CountMetrics> {
    metrics(truth, est, true)
}

/// As [`count_metrics`] but skips MAPE, so zero truth values are allowed.
pub fn count_metrics_without_mape(truth: &[f64], est: &[f64]) -> Result<CountMetrics> {
    metrics(truth, est, false)
}

impl CountMetrics {
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>12}", "metric", "value");
        let _ = writeln!(s, "{:<6} {:>12}", "n", self.n);
        let _ = writeln!(s, "{:<6} {:>12.4}", "MSE", self.mse);
        let _ = writeln!(s, "{:<6} {:>12.4}", "MAE", self.mae);
        let _ = writeln!(s, "{:<6} {:>12}", "MAPE%", opt(self.mape));
        let _ = writeln!(s, "{:<6} {:>12}", "R2", opt(self.r2));
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    image_id: String,
    x: f64,
    y: f64,
    confidence: f64,
}

/// Reads `image_id,x,y,confidence` rows into point sets ordered by image id.
pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<PointSet>> {
    let rows: Vec<PointRow> = crate::ingest::read_csv(path.as_ref())?;
    let mut sets: BTreeMap<String, PointSet> = BTreeMap::new();
    for r in rows {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence {} of image {} outside [0, 1]",
                r.confidence, r.image_id
            )));
        }
        sets.entry(r.image_id.clone())
            .or_insert_with(|| PointSet::new(&r.image_id))
            .points
            .push(SeedPoint {
                x: r.x,
                y: r.y,
                confidence: r.confidence,
            });
    }
    Ok(sets.into_values().collect())
}

pub fn write_points(path: impl AsRef<Path>, sets: &[PointSet]) -> Result<()> {
    let rows: Vec<PointRow> = sets
        .iter()
        .flat_map(|s| {
            s.points.iter().map(move |p| PointRow {
                image_id: s.image_id.clone(),
                x: p.x,
                y: p.y,
                confidence: p.confidence,
            })
        })
        .collect();
    crate::ingest::write_csv(path.as_ref(), &rows)
}
