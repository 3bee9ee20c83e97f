//! Representative frame selection.
//!
//! Each (row, side) sequence is divided into eight equal sections by seven
//! splitters. The frames under the middle five splitters are kept, giving five
//! frames per sequence, ten per side and twenty per plot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FrameRecord, PlotFrameSet, RowSide, SEQUENCES};

pub const FRAMES_PER_SEQUENCE: usize = 5;
pub const FRAMES_PER_SIDE: usize = 10;

/// Indices under splitters 2..=6 of a sequence of length `n`:
/// `round_half_up(k * n / 8)` clamped to `n - 1`.
pub fn splitter_indices(n: usize) -> Result<[usize; FRAMES_PER_SEQUENCE]> {
    if n == 0 {
        return Err(Error::InvalidInput(
            "cannot sample an empty sequence".into(),
        ));
    }
    let mut out = [0; FRAMES_PER_SEQUENCE];
    for (slot, k) in (2..=6).enumerate() {
        // floor(k n / 8 + 1/2) in integers
        out[slot] = ((k * n + 4) / 8).min(n - 1);
    }
    Ok(out)
}

/// The twenty frames of one plot, ten per row side. Each side holds the row 1
/// frames followed by the row 2 frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotSample {
    pub plot_id: String,
    pub side_a: Vec<FrameRecord>,
    pub side_b: Vec<FrameRecord>,
}

impl PlotSample {
    pub fn side(&self, side: RowSide) -> &[FrameRecord] {
        match side {
            RowSide::A => &self.side_a,
            RowSide::B => &self.side_b,
        }
    }
}

pub fn sample_plot(ps: &PlotFrameSet) -> Result<PlotSample> {
    let mut side_a = Vec::with_capacity(FRAMES_PER_SIDE);
    let mut side_b = Vec::with_capacity(FRAMES_PER_SIDE);
    for (row, side) in SEQUENCES {
        let seq = ps.sequence(row, side);
        if seq.is_empty() {
            return Err(Error::EmptySequence {
                plot: ps.plot_id.clone(),
                row: row.number(),
                side: side.letter(),
            });
        }
        let target = match side {
            RowSide::A => &mut side_a,
            RowSide::B => &mut side_b,
        };
        target.extend(splitter_indices(seq.len())?.iter().map(|&i| seq[i].clone()));
    }
    Ok(PlotSample {
        plot_id: ps.plot_id.clone(),
        side_a,
        side_b,
    })
}

/// One line of the sample manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRow {
    pub plot_id: String,
    pub side: RowSide,
    pub slot: usize,
    pub frame_path: String,
}

/// Writes `plot_id,side,slot,frame_path`.
pub fn write_sample_manifest(path: impl AsRef<Path>, samples: &[PlotSample]) -> Result<()> {
    let mut rows = Vec::with_capacity(samples.len() * 2 * FRAMES_PER_SIDE);
    for s in samples {
        for side in [RowSide::A, RowSide::B] {
            for (slot, f) in s.side(side).iter().enumerate() {
                rows.push(SampleRow {
                    plot_id: s.plot_id.clone(),
                    side,
                    slot,
                    frame_path: f.frame_path.clone(),
                });
            }
        }
    }
    crate::ingest::write_csv(path.as_ref(), &rows)
}

/// Per-plot frame paths read back from a sample manifest, ordered by slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledPaths {
    pub plot_id: String,
    pub side_a: Vec<String>,
    pub side_b: Vec<String>,
}

pub fn read_sample_manifest(path: impl AsRef<Path>) -> Result<Vec<SampledPaths>> {
    let rows: Vec<SampleRow> = crate::ingest::read_csv(path.as_ref())?;
    let mut plots: std::collections::BTreeMap<String, [Vec<Option<String>>; 2]> =
        Default::default();
    for r in rows {
        if r.slot >= FRAMES_PER_SIDE {
            return Err(Error::InvalidInput(format!(
                "slot {} out of range for plot {}",
                r.slot, r.plot_id
            )));
        }
        let entry = plots
            .entry(r.plot_id.clone())
            .or_insert_with(|| [vec![None; FRAMES_PER_SIDE], vec![None; FRAMES_PER_SIDE]]);
        let side = match r.side {
            RowSide::A => 0,
            RowSide::B => 1,
        };
        entry[side][r.slot] = Some(r.frame_path);
    }
    plots
        .into_iter()
        .map(|(plot_id, [a, b])| {
            let complete = |v: Vec<Option<String>>| -> Result<Vec<String>> {
                v.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| {
                    Error::InvalidInput(format!("plot {plot_id} is missing sample slots"))
                })
            };
            Ok(SampledPaths {
                side_a: complete(a)?,
                side_b: complete(b)?,
                plot_id: plot_id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CameraSide, Row};
    use proptest::prelude::*;

    fn plot_with_lengths(lens: [usize; 4]) -> PlotFrameSet {
        let mut ps = PlotFrameSet::new("p1");
        for ((row, side), n) in SEQUENCES.into_iter().zip(lens) {
            let seq = (0..n)
                .map(|i| FrameRecord {
                    frame_path: format!("r{}{}_{i:04}.png", row.number(), side),
                    timestamp_ms: i as u64,
                    collection_id: "c".into(),
                    camera_side: side.camera(),
                })
                .collect();
            ps.sequences.insert((row, side), seq);
        }
        ps
    }

    #[test]
    fn splitter_examples() {
        assert_eq!(splitter_indices(80).unwrap(), [20, 30, 40, 50, 60]);
        assert_eq!(splitter_indices(8).unwrap(), [2, 3, 4, 5, 6]);
        assert_eq!(splitter_indices(3).unwrap(), [1, 1, 2, 2, 2]);
        assert_eq!(splitter_indices(1).unwrap(), [0; 5]);
        assert!(splitter_indices(0).is_err());
    }

    #[test]
    fn sample_of_eighty() {
        let s = sample_plot(&plot_with_lengths([80; 4])).unwrap();
        let idx: Vec<u64> = s.side_a.iter().map(|f| f.timestamp_ms).collect();
        assert_eq!(idx, vec![20, 30, 40, 50, 60, 20, 30, 40, 50, 60]);
        assert!(s.side_a[..5]
            .iter()
            .all(|f| f.frame_path.starts_with("r1A")));
        assert!(s.side_a[5..]
            .iter()
            .all(|f| f.frame_path.starts_with("r2A")));
        assert!(s.side_b.iter().all(|f| f.camera_side == CameraSide::Right));
    }

    #[test]
    fn degenerate_sequences_repeat_first_frame() {
        let s = sample_plot(&plot_with_lengths([1; 4])).unwrap();
        assert!(s
            .side_a
            .iter()
            .chain(&s.side_b)
            .all(|f| f.timestamp_ms == 0));
        assert_eq!((s.side_a.len(), s.side_b.len()), (10, 10));
    }

    #[test]
    fn empty_sequence_is_named() {
        let mut ps = plot_with_lengths([3; 4]);
        ps.sequences.remove(&(Row::Two, RowSide::B));
        match sample_plot(&ps) {
            Err(Error::EmptySequence { plot, row, side }) => {
                assert_eq!((plot.as_str(), row, side), ("p1", 2, 'B'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample_plot(&plot_with_lengths([9, 10, 11, 12])).unwrap();
        let p = dir.path().join("samples.csv");
        write_sample_manifest(&p, std::slice::from_ref(&s)).unwrap();
        let back = read_sample_manifest(&p).unwrap();
        assert_eq!(back.len(), 1);
        let paths: Vec<String> = s.side_b.iter().map(|f| f.frame_path.clone()).collect();
        assert_eq!(back[0].side_b, paths);
    }

    proptest! {
        #[test]
        fn indices_are_ordered_and_skip_outer_splitters(n in 1usize..2000) {
            let idx = splitter_indices(n).unwrap();
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
            // strictly inside the first and last sections once they are resolvable
            if n >= 16 {
                prop_assert!(idx[0] > (n + 4) / 8 && idx[4] < (7 * n + 4) / 8);
            }
        }
    }
}
