//! Frame manifests, timestamp windows and ground-truth yield records.
//!
//! CSV layouts (UTF-8, header row required):
//!
//! * `frames.csv`: `frame_path,timestamp_ms,collection_id,camera_side`
//! * `windows.csv`: `plot_id,row,side,collection_id,start_ms,stop_ms`
//! * `yields.csv`: `plot_id,range,pass,mass_kg,moisture_pct,area_m2` with an
//!   optional trailing `quality` column.
//!
//! The left camera images row side A and the right camera row side B, so a
//! frame can only fall into windows of its own side.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Moisture basis for reported yields.
pub const MOISTURE_BASIS: f64 = 0.13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraSide {
    Left,
    Right,
}

impl CameraSide {
    pub fn row_side(self) -> RowSide {
        match self {
            CameraSide::Left => RowSide::A,
            CameraSide::Right => RowSide::B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RowSide {
    A,
    B,
}

impl RowSide {
    pub fn letter(self) -> char {
        match self {
            RowSide::A => 'A',
            RowSide::B => 'B',
        }
    }

    pub fn camera(self) -> CameraSide {
        match self {
            RowSide::A => CameraSide::Left,
            RowSide::B => CameraSide::Right,
        }
    }
}

impl fmt::Display for RowSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Row within a two-row plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Row {
    One,
    Two,
}

impl Row {
    pub fn number(self) -> u8 {
        match self {
            Row::One => 1,
            Row::Two => 2,
        }
    }
}

impl TryFrom<u8> for Row {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Row::One),
            2 => Ok(Row::Two),
            other => Err(format!("row must be 1 or 2, got {other}")),
        }
    }
}

impl From<Row> for u8 {
    fn from(r: Row) -> u8 {
        r.number()
    }
}

/// All four (row, side) sequences of a plot in sampling order.
pub const SEQUENCES: [(Row, RowSide); 4] = [
    (Row::One, RowSide::A),
    (Row::Two, RowSide::A),
    (Row::One, RowSide::B),
    (Row::Two, RowSide::B),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_path: String,
    pub timestamp_ms: u64,
    pub collection_id: String,
    pub camera_side: CameraSide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotWindow {
    pub plot_id: String,
    pub row: Row,
    pub side: RowSide,
    pub collection_id: String,
    pub start_ms: u64,
    pub stop_ms: u64,
}

impl PlotWindow {
    pub fn contains(&self, t: u64) -> bool {
        self.start_ms <= t && t < self.stop_ms
    }

    fn label(&self) -> String {
        format!(
            "{}/row{}/{}@{}[{},{})",
            self.plot_id,
            self.row.number(),
            self.side,
            self.collection_id,
            self.start_ms,
            self.stop_ms
        )
    }
}

/// Frames of one plot grouped by (row, side), each sequence sorted by time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlotFrameSet {
    pub plot_id: String,
    pub sequences: BTreeMap<(Row, RowSide), Vec<FrameRecord>>,
}

impl PlotFrameSet {
    pub fn new(plot_id: impl Into<String>) -> Self {
        PlotFrameSet {
            plot_id: plot_id.into(),
            sequences: BTreeMap::new(),
        }
    }

    pub fn sequence(&self, row: Row, side: RowSide) -> &[FrameRecord] {
        self.sequences
            .get(&(row, side))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub plots: BTreeMap<String, PlotFrameSet>,
    pub unassigned: Vec<FrameRecord>,
}

fn frame_order(a: &FrameRecord, b: &FrameRecord) -> std::cmp::Ordering {
    (
        a.timestamp_ms,
        &a.collection_id,
        &a.frame_path,
        a.camera_side,
    )
        .cmp(&(
            b.timestamp_ms,
            &b.collection_id,
            &b.frame_path,
            b.camera_side,
        ))
}

/// Assigns each frame to the window of its collection and camera side whose
/// half-open interval `[start, stop)` contains its timestamp.
pub fn assign_frames(frames: &[FrameRecord], windows: &[PlotWindow]) -> Result<Assignment> {
    let mut by_key: HashMap<(&str, RowSide), Vec<&PlotWindow>> = HashMap::new();
    let mut seen = HashMap::new();
    for w in windows {
        if w.start_ms >= w.stop_ms {
            return Err(Error::InvalidInput(format!("empty window {}", w.label())));
        }
        if let Some(prev) = seen.insert((&w.collection_id, &w.plot_id, w.row, w.side), w) {
            return Err(Error::InvalidInput(format!(
                "duplicate window {} and {}",
                prev.label(),
                w.label()
            )));
        }
        by_key
            .entry((w.collection_id.as_str(), w.side))
            .or_default()
            .push(w);
    }
    for list in by_key.values_mut() {
        list.sort_by_key(|w| (w.start_ms, w.stop_ms));
        for pair in list.windows(2) {
            if pair[1].start_ms < pair[0].stop_ms {
                return Err(Error::OverlappingWindows {
                    first: pair[0].label(),
                    second: pair[1].label(),
                });
            }
        }
    }

    let mut out = Assignment::default();
    for f in frames {
        let hit = by_key
            .get(&(f.collection_id.as_str(), f.camera_side.row_side()))
            .and_then(|list| {
                // windows are sorted and disjoint: last window starting at or before t
                let idx = list.partition_point(|w| w.start_ms <= f.timestamp_ms);
                idx.checked_sub(1)
                    .map(|i| list[i])
                    .filter(|w| w.contains(f.timestamp_ms))
            });
        match hit {
            Some(w) => out
                .plots
                .entry(w.plot_id.clone())
                .or_insert_with(|| PlotFrameSet::new(&w.plot_id))
                .sequences
                .entry((w.row, w.side))
                .or_default()
                .push(f.clone()),
            None => out.unassigned.push(f.clone()),
        }
    }
    for set in out.plots.values_mut() {
        for seq in set.sequences.values_mut() {
            seq.sort_by(frame_order);
        }
    }
    out.unassigned.sort_by(frame_order);
    Ok(out)
}

/// Converts harvested mass to t/ha at the 13% moisture basis.
pub fn normalize_yield(mass_kg: f64, moisture: f64, area_m2: f64) -> Result<f64> {
    if !(area_m2 > 0.0) {
        return Err(Error::Domain(format!(
            "plot area must be positive, got {area_m2}"
        )));
    }
    if !(mass_kg >= 0.0) {
        return Err(Error::Domain(format!("negative harvested mass {mass_kg}")));
    }
    if !(0.0..1.0).contains(&moisture) {
        return Err(Error::Domain(format!(
            "moisture fraction {moisture} outside [0, 1)"
        )));
    }
    Ok(mass_kg * (1.0 - moisture) / (1.0 - MOISTURE_BASIS) / area_m2 * 10.0)
}

/// One line of `yields.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldRow {
    pub plot_id: String,
    pub range: i64,
    pub pass: i64,
    pub mass_kg: f64,
    pub moisture_pct: f64,
    pub area_m2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<String>,
}

/// Per-plot ground truth and estimates, raw and spatially adjusted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotYieldRecord {
    pub plot_id: String,
    pub range: i64,
    pub pass: i64,
    pub mass_kg: f64,
    pub moisture: f64,
    pub area_m2: f64,
    pub yield_t_ha: f64,
    pub estimated_tsc: Option<f64>,
    pub estimated_yield: Option<f64>,
    pub adjusted_yield: Option<f64>,
    pub adjusted_tsc: Option<f64>,
    pub adjusted_estimated_yield: Option<f64>,
    pub quality: Option<String>,
}

impl PlotYieldRecord {
    pub fn from_row(row: &YieldRow) -> Result<Self> {
        let moisture = row.moisture_pct / 100.0;
        let yield_t_ha = normalize_yield(row.mass_kg, moisture, row.area_m2)
            .map_err(|e| Error::InvalidInput(format!("plot {}: {e}", row.plot_id)))?;
        Ok(PlotYieldRecord {
            plot_id: row.plot_id.clone(),
            range: row.range,
            pass: row.pass,
            mass_kg: row.mass_kg,
            moisture,
            area_m2: row.area_m2,
            yield_t_ha,
            estimated_tsc: None,
            estimated_yield: None,
            adjusted_yield: None,
            adjusted_tsc: None,
            adjusted_estimated_yield: None,
            quality: row.quality.clone(),
        })
    }
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let frames: Vec<FrameRecord> = read_csv(path.as_ref())?;
    if let Some(f) = frames.iter().find(|f| f.frame_path.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "empty frame path at t={}",
            f.timestamp_ms
        )));
    }
    Ok(frames)
}

pub fn write_frames(path: impl AsRef<Path>, frames: &[FrameRecord]) -> Result<()> {
    write_csv(path.as_ref(), frames)
}

pub fn read_windows(path: impl AsRef<Path>) -> Result<Vec<PlotWindow>> {
    read_csv(path.as_ref())
}

pub fn write_windows(path: impl AsRef<Path>, windows: &[PlotWindow]) -> Result<()> {
    write_csv(path.as_ref(), windows)
}

pub fn read_yields(path: impl AsRef<Path>) -> Result<Vec<YieldRow>> {
    read_csv(path.as_ref())
}

pub fn write_yields(path: impl AsRef<Path>, rows: &[YieldRow]) -> Result<()> {
    write_csv(path.as_ref(), rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignedRow {
    plot_id: String,
    row: Row,
    side: RowSide,
    frame_path: String,
    timestamp_ms: u64,
    collection_id: String,
    camera_side: CameraSide,
}

/// Writes `plot_id,row,side,frame_path,timestamp_ms,collection_id,camera_side`.
pub fn write_assignment(path: impl AsRef<Path>, a: &Assignment) -> Result<()> {
    let mut rows = Vec::new();
    for set in a.plots.values() {
        for ((row, side), seq) in &set.sequences {
            for f in seq {
                rows.push(AssignedRow {
                    plot_id: set.plot_id.clone(),
                    row: *row,
                    side: *side,
                    frame_path: f.frame_path.clone(),
                    timestamp_ms: f.timestamp_ms,
                    collection_id: f.collection_id.clone(),
                    camera_side: f.camera_side,
                });
            }
        }
    }
    write_csv(path.as_ref(), &rows)
}
