//! Moving-grid spatial adjustment.
//!
//! For each plot `i` the moving mean `x_i` averages the observed values of
//! the neighbours selected by a [`GridMask`]. Adjusted values are
//! `p_adj = p_obs - b (x_i - x̄)` where `b` is the least-squares slope of the
//! observed values on the moving means and `x̄` the mean of the moving means.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPlot {
    pub plot_id: String,
    pub range: i64,
    pub pass: i64,
    /// `None` marks a missing cell.
    pub value: Option<f64>,
}

/// Plots laid out on a (range, pass) grid.
#[derive(Debug, Clone)]
pub struct FieldGrid {
    plots: Vec<GridPlot>,
    by_cell: HashMap<(i64, i64), usize>,
    by_id: HashMap<String, usize>,
}

impl FieldGrid {
    pub fn new(plots: Vec<GridPlot>) -> Result<Self> {
        let mut by_cell = HashMap::with_capacity(plots.len());
        let mut by_id = HashMap::with_capacity(plots.len());
        for (i, p) in plots.iter().enumerate() {
            if let Some(v) = p.value {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "plot {} has value {v}",
                        p.plot_id
                    )));
                }
            }
            if let Some(j) = by_cell.insert((p.range, p.pass), i) {
                return Err(Error::InvalidInput(format!(
                    "plots {} and {} share range {} pass {}",
                    plots[j].plot_id, p.plot_id, p.range, p.pass
                )));
            }
            if by_id.insert(p.plot_id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate plot id {}",
                    p.plot_id
                )));
            }
        }
        Ok(FieldGrid {
            plots,
            by_cell,
            by_id,
        })
    }

    /// Builds a complete grid from a row-major `n_range x n_pass` value list,
    /// with plot ids `r{range}p{pass}` and coordinates starting at 1.
    pub fn from_rows(n_range: usize, n_pass: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n_range * n_pass {
            return Err(Error::Shape(format!(
                "{} values for a {n_range}x{n_pass} field",
                values.len()
            )));
        }
        let plots = (0..n_range)
            .flat_map(|r| (0..n_pass).map(move |p| (r, p)))
            .map(|(r, p)| GridPlot {
                plot_id: format!("r{:03}p{:03}", r + 1, p + 1),
                range: r as i64 + 1,
                pass: p as i64 + 1,
                value: Some(values[r * n_pass + p]),
            })
            .collect();
        Self::new(plots)
    }

    pub fn plots(&self) -> &[GridPlot] {
        &self.plots
    }

    pub fn get(&self, plot_id: &str) -> Option<&GridPlot> {
        self.by_id.get(plot_id).map(|&i| &self.plots[i])
    }

    pub fn value_at(&self, range: i64, pass: i64) -> Option<f64> {
        self.by_cell
            .get(&(range, pass))
            .and_then(|&i| self.plots[i].value)
    }
}

/// Neighbour offsets `(Δrange, Δpass)` that make up the moving grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    offsets: Vec<(i64, i64)>,
}

impl Default for GridMask {
    /// 5x5 window without its four corners and its centre: 20 neighbours.
    fn default() -> Self {
        Self::window(2, 2, true)
    }
}

impl GridMask {
    pub fn from_offsets(offsets: impl IntoIterator<Item = (i64, i64)>) -> Result<Self> {
        let set: BTreeSet<(i64, i64)> = offsets.into_iter().collect();
        if set.contains(&(0, 0)) {
            return Err(Error::InvalidInput(
                "grid mask may not contain the centre plot".into(),
            ));
        }
        if set.is_empty() {
            return Err(Error::InvalidInput("grid mask is empty".into()));
        }
        Ok(GridMask {
            offsets: set.into_iter().collect(),
        })
    }

    /// `(2 half_range + 1) x (2 half_pass + 1)` window minus the centre and,
    /// optionally, its four corners.
    pub fn window(half_range: i64, half_pass: i64, drop_corners: bool) -> Self {
        let offsets = (-half_range..=half_range)
            .flat_map(|dr| (-half_pass..=half_pass).map(move |dp| (dr, dp)))
            .filter(|&(dr, dp)| (dr, dp) != (0, 0))
            .filter(|&(dr, dp)| {
                !(drop_corners
                    && dr.abs() == half_range
                    && dp.abs() == half_pass
                    && (half_range, half_pass) != (0, 0))
            })
            .collect();
        GridMask { offsets }
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }
}

/// Mean of the neighbour values of `plot_id` under `mask`; neighbours outside
/// the field or missing are skipped.
pub fn moving_mean(grid: &FieldGrid, mask: &GridMask, plot_id: &str) -> Result<f64> {
    let p = grid
        .get(plot_id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown plot {plot_id}")))?;
    moving_mean_at(grid, mask, p)
}

fn moving_mean_at(grid: &FieldGrid, mask: &GridMask, p: &GridPlot) -> Result<f64> {
    let (sum, n) = mask
        .offsets
        .iter()
        .filter_map(|(dr, dp)| grid.value_at(p.range + dr, p.pass + dp))
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::NoNeighbours(p.plot_id.clone()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedPlot {
    pub plot_id: String,
    pub range: i64,
    pub pass: i64,
    pub value: Option<f64>,
    pub adjusted: Option<f64>,
    pub moving_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentResult {
    /// Slope of observed values on moving means.
    pub b: f64,
    /// Mean of the moving means.
    pub x_bar: f64,
    /// Set when the moving means have no variance; `b` is then 0.
    pub zero_variance: bool,
    pub plots: Vec<AdjustedPlot>,
}

impl AdjustmentResult {
    pub fn adjusted(&self, plot_id: &str) -> Option<f64> {
        self.plots
            .iter()
            .find(|p| p.plot_id == plot_id)
            .and_then(|p| p.adjusted)
    }
}

/// Applies the moving-grid adjustment to every plot with an observed value.
pub fn adjust(grid: &FieldGrid, mask: &GridMask) -> Result<AdjustmentResult> {
    let means: Vec<Option<f64>> = grid
        .plots
        .par_iter()
        .map(|p| match p.value {
            Some(_) => moving_mean_at(grid, mask, p).map(Some),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = grid
        .plots
        .iter()
        .zip(&means)
        .filter_map(|(p, m)| Some((m.as_ref().copied()?, p.value?)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "spatial adjustment needs at least 3 observed plots, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let x_bar = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let p_bar = pairs.iter().map(|(_, p)| p).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|(x, _)| (x - x_bar).powi(2)).sum();
    let sxp: f64 = pairs.iter().map(|(x, p)| (x - x_bar) * (p - p_bar)).sum();
    let scale: f64 = pairs.iter().map(|(x, _)| x * x).sum::<f64>() / n;
    let zero_variance = sxx <= 1e-24 * scale.max(f64::MIN_POSITIVE) * n;
    let b = if zero_variance { 0.0 } else { sxp / sxx };
    let plots = grid
        .plots
        .iter()
        .zip(means)
        .map(|(p, m)| AdjustedPlot {
            plot_id: p.plot_id.clone(),
            range: p.range,
            pass: p.pass,
            value: p.value,
            adjusted: p.value.zip(m).map(|(v, x)| v - b * (x - x_bar)),
            moving_mean: m,
        })
        .collect();
    Ok(AdjustmentResult {
        b,
        x_bar,
        zero_variance,
        plots,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ValueRow {
    plot_id: String,
    range: i64,
    pass: i64,
    value: Option<f64>,
}

/// Reads `plot_id,range,pass,value`; an empty value is a missing cell.
pub fn read_grid(path: impl AsRef<Path>) -> Result<FieldGrid> {
    let rows: Vec<ValueRow> = crate::ingest::read_csv(path.as_ref())?;
    FieldGrid::new(
        rows.into_iter()
            .map(|r| GridPlot {
                plot_id: r.plot_id,
                range: r.range,
                pass: r.pass,
                value: r.value,
            })
            .collect(),
    )
}

pub fn write_grid(path: impl AsRef<Path>, grid: &FieldGrid) -> Result<()> {
    let rows: Vec<ValueRow> = grid
        .plots
        .iter()
        .map(|p| ValueRow {
            plot_id: p.plot_id.clone(),
            range: p.range,
            pass: p.pass,
            value: p.value,
        })
        .collect();
    crate::ingest::write_csv(path.as_ref(), &rows)
}

/// Writes `plot_id,range,pass,value,adjusted,moving_mean`.
pub fn write_adjusted(path: impl AsRef<Path>, res: &AdjustmentResult) -> Result<()> {
    crate::ingest::write_csv(path.as_ref(), &res.plots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentSummary {
    pub b: f64,
    pub x_bar: f64,
    pub zero_variance: bool,
    pub plots: usize,
}

impl From<&AdjustmentResult> for AdjustmentSummary {
    fn from(r: &AdjustmentResult) -> Self {
        AdjustmentSummary {
            b: r.b,
            x_bar: r.x_bar,
            zero_variance: r.zero_variance,
            plots: r.plots.iter().filter(|p| p.adjusted.is_some()).count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn five_by_five() -> FieldGrid {
        FieldGrid::from_rows(5, 5, &(1..=25).map(f64::from).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn default_mask_has_twenty_cells() {
        let m = GridMask::default();
        assert_eq!(m.offsets().len(), 20);
        for c in [(0, 0), (2, 2), (-2, 2), (2, -2), (-2, -2)] {
            assert!(!m.offsets().contains(&c));
        }
        assert!(GridMask::from_offsets([(0, 0)]).is_err());
    }

    #[test]
    fn centre_moving_mean() {
        let g = five_by_five();
        let x = moving_mean(&g, &GridMask::default(), "r003p003").unwrap();
        assert!((x - 13.0).abs() < 1e-12);
    }

    #[test]
    fn corner_moving_mean() {
        let g = five_by_five();
        // corner (1,1): in-bounds offsets are dr, dp in 0..=2 minus (0,0) and (2,2)
        let mut vals = Vec::new();
        for dr in 0..=2 {
            for dp in 0..=2 {
                if (dr, dp) != (0, 0) && (dr, dp) != (2, 2) {
                    vals.push((dr * 5 + dp + 1) as f64);
                }
            }
        }
        let want = vals.iter().sum::<f64>() / vals.len() as f64;
        let x = moving_mean(&g, &GridMask::default(), "r001p001").unwrap();
        assert!((x - want).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_unchanged() {
        let g = FieldGrid::from_rows(6, 7, &[4.2; 42]).unwrap();
        for p in g.plots() {
            assert!(
                (moving_mean(&g, &GridMask::default(), &p.plot_id).unwrap() - 4.2).abs() < 1e-12
            );
        }
        let r = adjust(&g, &GridMask::default()).unwrap();
        assert!(r.zero_variance);
        assert_eq!(r.b, 0.0);
        assert!(r.plots.iter().all(|p| p.adjusted == p.value));
    }

    #[test]
    fn isolated_plot_has_no_neighbours() {
        let plots = vec![
            GridPlot {
                plot_id: "a".into(),
                range: 0,
                pass: 0,
                value: Some(1.0),
            },
            GridPlot {
                plot_id: "b".into(),
                range: 10,
                pass: 10,
                value: Some(2.0),
            },
        ];
        let g = FieldGrid::new(plots).unwrap();
        assert!(matches!(
            moving_mean(&g, &GridMask::default(), "a"),
            Err(Error::NoNeighbours(_))
        ));
    }

    #[test]
    fn missing_cells_are_skipped() {
        let mut plots = five_by_five().plots().to_vec();
        plots[0].value = None;
        let g = FieldGrid::new(plots).unwrap();
        let r = adjust(&g, &GridMask::default()).unwrap();
        assert_eq!(r.plots[0].adjusted, None);
        // plot (2,2) loses neighbour (1,1) = 1.0
        let x = moving_mean(&g, &GridMask::default(), "r002p002").unwrap();
        let full = moving_mean(&five_by_five(), &GridMask::default(), "r002p002").unwrap();
        assert!(x > full);
    }

    #[test]
    fn duplicate_cells_rejected() {
        let plots = vec![
            GridPlot {
                plot_id: "a".into(),
                range: 0,
                pass: 0,
                value: Some(1.0),
            },
            GridPlot {
                plot_id: "b".into(),
                range: 0,
                pass: 0,
                value: Some(2.0),
            },
        ];
        assert!(FieldGrid::new(plots).is_err());
    }

    fn field(values: &[f64]) -> FieldGrid {
        FieldGrid::from_rows(6, 6, values).unwrap()
    }

    proptest! {
        #[test]
        fn shift_scale_and_mean(values in proptest::collection::vec(-10.0f64..10.0, 36),
                                c in -50.0f64..50.0, a in 0.1f64..5.0) {
            let mask = GridMask::default();
            let base = adjust(&field(&values), &mask).unwrap();
            let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
            let scaled: Vec<f64> = values.iter().map(|v| v * a).collect();
            let rs = adjust(&field(&shifted), &mask).unwrap();
            let ra = adjust(&field(&scaled), &mask).unwrap();
            for ((p, s), q) in base.plots.iter().zip(&rs.plots).zip(&ra.plots) {
                let (p, s, q) = (p.adjusted.unwrap(), s.adjusted.unwrap(), q.adjusted.unwrap());
                prop_assert!((s - (p + c)).abs() < 1e-9);
                prop_assert!((q - a * p).abs() < 1e-9 * (1.0 + a * p.abs()));
            }
            let mean_obs = values.iter().sum::<f64>() / 36.0;
            let mean_adj = base.plots.iter().map(|p| p.adjusted.unwrap()).sum::<f64>() / 36.0;
            prop_assert!((mean_adj - mean_obs).abs() < 1e-9);
            let dev: f64 = base.plots.iter().map(|p| p.moving_mean.unwrap() - base.x_bar).sum();
            prop_assert!(dev.abs() / 36.0 < 1e-9);
        }
    }
}
