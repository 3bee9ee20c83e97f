//! Top-fraction selection and its agreement with a ground-truth ranking.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Selection thresholds evaluated by default.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.10, 0.20, 0.30];

/// Number of plots selected at `fraction` of `n`: `ceil(fraction * n)`, with a
/// small allowance so that e.g. `0.1 * 30` selects 3 and not 4.
pub fn selection_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// The `ceil(fraction * n)` plots with the largest values. Ties are broken by
/// ascending plot id.
pub fn select_top(values: &[(String, f64)], fraction: f64) -> Result<BTreeSet<String>> {
    if values.is_empty() {
        return Err(Error::InvalidInput(
            "cannot select from an empty set".into(),
        ));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "selection fraction {fraction} outside (0, 1]"
        )));
    }
    if let Some((id, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("plot {id} has value {v}")));
    }
    let mut order: Vec<&(String, f64)> = values.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let k = selection_size(values.len(), fraction);
    Ok(order
        .into_iter()
        .take(k)
        .map(|(id, _)| id.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn new(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn population(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Counts agreement between the truly top plots and the predicted top plots.
pub fn confusion(
    truth: &BTreeSet<String>,
    predicted: &BTreeSet<String>,
    population: &BTreeSet<String>,
) -> Result<ConfusionCounts> {
    for (name, set) in [("truth", truth), ("predicted", predicted)] {
        if let Some(stray) = set.difference(population).next() {
            return Err(Error::InvalidInput(format!(
                "{name} selection contains {stray}, which is not in the population"
            )));
        }
    }
    let tp = truth.intersection(predicted).count();
    let fp = predicted.len() - tp;
    let fn_ = truth.len() - tp;
    Ok(ConfusionCounts {
        tp,
        fp,
        fn_,
        tn: population.len() - tp - fp - fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    /// `None` when no plot is truly selected.
    pub sensitivity: Option<f64>,
    /// `None` when every plot is truly selected.
    pub specificity: Option<f64>,
}

pub fn scores(c: &ConfusionCounts) -> Result<Scores> {
    let n = c.population();
    if n == 0 {
        return Err(Error::InvalidInput("scores of an empty population".into()));
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(Scores {
        accuracy: (c.tp + c.tn) as f64 / n as f64,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    })
}

/// Plot membership for a Venn view of one threshold.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionOverlap {
    pub both: Vec<String>,
    pub truth_only: Vec<String>,
    pub predicted_only: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub overlap: SelectionOverlap,
}

/// Selects the top fraction under both rankings at each threshold and scores
/// the predicted selection against the true one.
pub fn evaluate_selection(
    truth: &[(String, f64)],
    predicted: &[(String, f64)],
    thresholds: &[f64],
) -> Result<Vec<SelectionReport>> {
    let population: BTreeSet<String> = truth.iter().map(|(id, _)| id.clone()).collect();
    let pred_ids: BTreeSet<String> = predicted.iter().map(|(id, _)| id.clone()).collect();
    if population.len() != truth.len() || pred_ids.len() != predicted.len() {
        return Err(Error::InvalidInput(
            "duplicate plot ids in ranking input".into(),
        ));
    }
    if population != pred_ids {
        return Err(Error::InvalidInput(
            "truth and predicted values cover different plots".into(),
        ));
    }
    thresholds
        .iter()
        .map(|&threshold| {
            let t = select_top(truth, threshold)?;
            let p = select_top(predicted, threshold)?;
            let counts = confusion(&t, &p, &population)?;
            let s = scores(&counts)?;
            Ok(SelectionReport {
                threshold,
                counts,
                accuracy: s.accuracy,
                sensitivity: s.sensitivity,
                specificity: s.specificity,
                overlap: SelectionOverlap {
                    both: t.intersection(&p).cloned().collect(),
                    truth_only: t.difference(&p).cloned().collect(),
                    predicted_only: p.difference(&t).cloned().collect(),
                },
            })
        })
        .collect()
}

pub fn report_table(reports: &[SelectionReport]) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>9} {:>5} {:>5} {:>5} {:>5} {:>8} {:>11} {:>11}",
        "threshold", "TP", "TN", "FP", "FN", "accuracy", "sensitivity", "specificity"
    );
    for r in reports {
        let c = r.counts;
        let _ = writeln!(
            s,
            "{:>8.0}% {:>5} {:>5} {:>5} {:>5} {:>8.4} {:>11} {:>11}",
            r.threshold * 100.0,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            r.accuracy,
            opt(r.sensitivity),
            opt(r.specificity)
        );
    }
    s
}

#[derive(Debug, Serialize)]
struct MembershipRow<'a> {
    plot_id: &'a str,
    set: &'a str,
}

/// Writes one `plot_id,set` CSV per threshold (`venn_<pct>.csv`) listing
/// every selected plot as `both`, `truth_only` or `predicted_only`.
pub fn write_venn_sets(
    dir: impl AsRef<Path>,
    reports: &[SelectionReport],
) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    for r in reports {
        let path = dir.join(format!("venn_{:02.0}.csv", r.threshold * 100.0));
        let mut rows = Vec::new();
        for (label, ids) in [
            ("both", &r.overlap.both),
            ("truth_only", &r.overlap.truth_only),
            ("predicted_only", &r.overlap.predicted_only),
        ] {
            rows.extend(ids.iter().map(|id| MembershipRow {
                plot_id: id,
                set: label,
            }));
        }
        crate::ingest::write_csv(&path, &rows)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vals(v: &[f64]) -> Vec<(String, f64)> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| (format!("p{i:02}"), x))
            .collect()
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn top_fraction() {
        let v = vals(&[5.0, 9.0, 1.0, 7.0, 3.0, 2.0, 8.0, 4.0, 6.0, 0.0]);
        assert_eq!(select_top(&v, 0.2).unwrap(), set(&["p01", "p06"]));
        assert_eq!(select_top(&v, 1.0).unwrap().len(), 10);
        assert!(select_top(&[], 0.2).is_err());
        assert!(select_top(&v, 0.0).is_err());
        assert!(select_top(&v, 1.5).is_err());
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let v = vals(&[1.0; 10]);
        assert_eq!(select_top(&v, 0.1).unwrap(), set(&["p00"]));
    }

    #[test]
    fn selection_size_rounding() {
        assert_eq!(selection_size(30, 0.1), 3);
        assert_eq!(selection_size(650, 0.1), 65);
        assert_eq!(selection_size(650, 0.3), 195);
        assert_eq!(selection_size(10, 0.25), 3);
    }

    #[test]
    fn confusion_cases() {
        let pop: BTreeSet<String> = (0..10).map(|i| format!("p{i:02}")).collect();
        let t = set(&["p00", "p01"]);
        assert_eq!(
            confusion(&t, &t, &pop).unwrap(),
            ConfusionCounts::new(2, 8, 0, 0)
        );
        let p = set(&["p02", "p03"]);
        assert_eq!(
            confusion(&t, &p, &pop).unwrap(),
            ConfusionCounts::new(0, 6, 2, 2)
        );
        assert!(confusion(&set(&["zz"]), &p, &pop).is_err());
    }

    #[test]
    fn published_rows() {
        let s = scores(&ConfusionCounts::new(20, 540, 45, 45)).unwrap();
        assert!((s.accuracy - 0.8615).abs() < 5e-5);
        assert!((s.sensitivity.unwrap() - 0.3077).abs() < 5e-5);
        assert!((s.specificity.unwrap() - 0.9231).abs() < 5e-5);
        let s = scores(&ConfusionCounts::new(11, 531, 54, 54)).unwrap();
        assert!((s.accuracy - 0.8338).abs() < 5e-5);
        assert!((s.sensitivity.unwrap() - 0.1692).abs() < 5e-5);
        assert!((s.specificity.unwrap() - 0.9077).abs() < 5e-5);
    }

    #[test]
    fn perfect_and_undefined_scores() {
        let s = scores(&ConfusionCounts::new(3, 7, 0, 0)).unwrap();
        assert_eq!(
            (s.accuracy, s.sensitivity, s.specificity),
            (1.0, Some(1.0), Some(1.0))
        );
        let s = scores(&ConfusionCounts::new(0, 5, 0, 0)).unwrap();
        assert_eq!(s.sensitivity, None);
        assert!(scores(&ConfusionCounts::new(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn evaluation_and_venn_files() {
        let truth = vals(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let pred = vals(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 9.5]);
        let r = evaluate_selection(&truth, &pred, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r[0].counts, ConfusionCounts::new(0, 8, 1, 1));
        assert_eq!(r[1].counts, ConfusionCounts::new(2, 8, 0, 0));
        let dir = tempfile::tempdir().unwrap();
        let files = write_venn_sets(dir.path(), &r).unwrap();
        assert_eq!(files.len(), 3);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text, "plot_id,set\np09,truth_only\np08,predicted_only\n");
        assert!(report_table(&r).contains("10%"));
        let json = serde_json::to_string(&r[0].counts).unwrap();
        assert_eq!(json, r#"{"tp":0,"tn":8,"fp":1,"fn":1}"#);
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_selection(v in proptest::collection::vec(-100.0f64..100.0, 1..60),
                                              frac in 0.01f64..1.0) {
            let a = vals(&v);
            let b: Vec<(String, f64)> = a.iter().map(|(id, x)| (id.clone(), (x / 50.0).exp() * 3.0 - 1.0)).collect();
            prop_assert_eq!(select_top(&a, frac).unwrap(), select_top(&b, frac).unwrap());
        }

        #[test]
        fn counts_sum_to_population(v in proptest::collection::vec(0.0f64..1.0, 2..80),
                                    w in proptest::collection::vec(0.0f64..1.0, 80), frac in 0.05f64..1.0) {
            let truth = vals(&v);
            let pred: Vec<(String, f64)> = truth.iter().zip(&w).map(|((id, _), x)| (id.clone(), *x)).collect();
            let r = evaluate_selection(&truth, &pred, &[frac]).unwrap();
            prop_assert_eq!(r[0].counts.population(), v.len());
            prop_assert!((0.0..=1.0).contains(&r[0].accuracy));
        }
    }
}
