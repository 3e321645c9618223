//! Confusion matrices, per-class precision/recall/F1, macro-F1, and the
//! per-frame versus per-sample scoring units.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::dsp::ChannelSet;
use crate::error::{Error, Result};
use crate::ingest::{Mode, NUM_MODES};

/// Counts indexed `[truth][predicted]` by zero-based mode index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_MODES]; NUM_MODES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_MODES]; NUM_MODES]) -> Self {
        ConfusionMatrix { counts }
    }

    /// Add `n` observations of (`truth`, `pred`), both mode ids 1..=8.
    pub fn add(&mut self, truth: u8, pred: u8, n: u64) -> Result<()> {
        let t = Mode::from_id(truth).ok_or_else(|| Error::invalid(format!("truth label {truth} is not a mode id")))?;
        let p = Mode::from_id(pred).ok_or_else(|| Error::invalid(format!("predicted label {pred} is not a mode id")))?;
        self.counts[t.index()][p.index()] += n;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_MODES).map(|k| self.counts[k][k]).sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn predicted(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }

    /// Percent; 0 when nothing was predicted as `k`.
    pub fn precision(&self, k: usize) -> f64 {
        ratio(self.counts[k][k], self.predicted(k))
    }

    /// Percent; 0 when `k` has no support.
    pub fn recall(&self, k: usize) -> f64 {
        ratio(self.counts[k][k], self.support(k))
    }

    pub fn f1(&self, k: usize) -> f64 {
        let (p, r) = (self.precision(k), self.recall(k));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    /// Mean F1 over classes with non-zero support. `None` for an empty matrix.
    pub fn macro_f1(&self) -> Option<f64> {
        let present: Vec<usize> = (0..NUM_MODES).filter(|&k| self.support(k) > 0).collect();
        if present.is_empty() {
            return None;
        }
        Some(present.iter().map(|&k| self.f1(k)).sum::<f64>() / present.len() as f64)
    }

    /// Sum of off-diagonal counts.
    pub fn off_diagonal(&self) -> u64 {
        self.total() - self.trace()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Tally (truth, pred) pairs of mode ids.
pub fn confusion(truth: &[u8], pred: &[u8]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p, 1)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Frame,
    Sample,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Frame => "frame",
            Unit::Sample => "sample",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub mode: Mode,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unit: Unit,
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassScores>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, unit: Unit) -> Result<Self> {
        let macro_f1 = confusion
            .macro_f1()
            .ok_or_else(|| Error::invalid("cannot score an empty confusion matrix"))?;
        let classes = Mode::ALL
            .iter()
            .map(|&mode| {
                let k = mode.index();
                ClassScores {
                    mode,
                    support: confusion.support(k),
                    precision: confusion.precision(k),
                    recall: confusion.recall(k),
                    f1: confusion.f1(k),
                }
            })
            .collect();
        Ok(EvalReport {
            unit,
            accuracy: confusion.accuracy(),
            macro_f1,
            classes,
            confusion,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Confusion grid with recall/precision/F1 rows underneath, one decimal.
    pub fn to_table(&self) -> String {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        let w = names.iter().map(|n| n.len()).max().unwrap_or(0).max(9) + 2;
        let mut out = String::new();
        let _ = writeln!(out, "per-{} evaluation, rows = ground truth, columns = predicted", self.unit);
        let _ = write!(out, "{:<w$}", "");
        for n in &names {
            let _ = write!(out, "{n:>w$}");
        }
        out.push('\n');
        for (k, n) in names.iter().enumerate() {
            let _ = write!(out, "{n:<w$}");
            for c in self.confusion.counts[k] {
                let _ = write!(out, "{c:>w$}");
            }
            out.push('\n');
        }
        let rows: [(&str, fn(&ClassScores) -> f64); 3] =
            [("Recall", |c| c.recall), ("Precision", |c| c.precision), ("F1", |c| c.f1)];
        for (label, get) in rows {
            let _ = write!(out, "{label:<w$}");
            for c in &self.classes {
                let _ = write!(out, "{:>w$.1}", get(c));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "accuracy {:.1}  macro-F1 {:.1}", self.accuracy, self.macro_f1);
        out
    }
}

/// Score one prediction per frame against the frames' majority labels.
pub fn per_frame_report(truth: &[u8], pred: &[u8]) -> Result<EvalReport> {
    EvalReport::from_confusion(confusion(truth, pred)?, Unit::Frame)
}

/// Broadcast each frame's prediction over its samples. `label_counts[k]` is
/// the number of samples in the frame whose label is mode `k + 1`.
pub fn per_sample_report(label_counts: &[[u32; NUM_MODES]], pred: &[u8]) -> Result<EvalReport> {
    if label_counts.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} predictions",
            label_counts.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (counts, &p) in label_counts.iter().zip(pred) {
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 {
                cm.add(k as u8 + 1, p, n as u64)?;
            }
        }
    }
    EvalReport::from_confusion(cm, Unit::Sample)
}

/// Per-sample label histogram of a raw label sequence.
pub fn label_histogram(labels: &[u8]) -> Result<[u32; NUM_MODES]> {
    let mut counts = [0u32; NUM_MODES];
    for &l in labels {
        let m = Mode::from_id(l).ok_or_else(|| Error::invalid(format!("label {l} is not a mode id")))?;
        counts[m.index()] += 1;
    }
    Ok(counts)
}

/// Both units for preprocessed frames.
pub fn evaluate_sets(sets: &[ChannelSet], pred: &[u8]) -> Result<(EvalReport, EvalReport)> {
    let truth: Vec<u8> = sets.iter().map(|s| s.frame_label).collect();
    let counts: Vec<[u32; NUM_MODES]> = sets.iter().map(|s| s.label_counts).collect();
    Ok((per_frame_report(&truth, pred)?, per_sample_report(&counts, pred)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const TABLE_III: [[u64; 8]; 8] = [
        [923, 6, 0, 1, 5, 15, 9, 2],
        [9, 719, 2, 0, 0, 0, 1, 0],
        [0, 1, 336, 0, 0, 0, 0, 0],
        [3, 0, 0, 508, 0, 0, 0, 0],
        [10, 0, 0, 0, 1249, 12, 3, 2],
        [40, 4, 0, 0, 18, 826, 4, 9],
        [41, 2, 0, 0, 13, 4, 541, 46],
        [7, 0, 0, 0, 0, 0, 19, 308],
    ];

    #[test]
    fn hand_count_example() {
        let cm = confusion(&[1, 1, 2], &[1, 2, 2]).unwrap();
        assert_eq!(cm.counts[0][0], 1);
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.counts[1][1], 1);
        assert_eq!(cm.total(), 3);
        assert!(confusion(&[1], &[1, 2]).is_err());
        assert!(confusion(&[0], &[1]).is_err());
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = confusion(&[1, 2, 3, 8, 8], &[1, 2, 3, 8, 8]).unwrap();
        assert_eq!(cm.macro_f1(), Some(100.0));
        assert_eq!(cm.accuracy(), 100.0);
    }

    #[test]
    fn two_class_arithmetic() {
        let mut counts = [[0; 8]; 8];
        counts[0][0] = 8;
        counts[0][1] = 2;
        counts[1][0] = 3;
        counts[1][1] = 7;
        let cm = ConfusionMatrix::from_counts(counts);
        // precision 8/11, 7/9; recall 8/10, 7/10
        let (p0, p1, r0, r1) = (800.0 / 11.0, 700.0 / 9.0, 80.0, 70.0);
        assert!((cm.precision(0) - p0).abs() < 1e-12);
        assert!((cm.precision(1) - p1).abs() < 1e-12);
        assert!((cm.recall(0) - r0).abs() < 1e-12);
        assert!((cm.recall(1) - r1).abs() < 1e-12);
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        let want = (f(p0, r0) + f(p1, r1)) / 2.0;
        assert!((cm.macro_f1().unwrap() - want).abs() < 1e-12);
        assert!((cm.macro_f1().unwrap() - 74.9).abs() < 0.05);
    }

    #[test]
    fn published_grid() {
        let cm = ConfusionMatrix::from_counts(TABLE_III);
        assert_eq!(cm.support(2), 337);
        let recall = [96.0, 98.4, 99.7, 99.4, 97.9, 91.7, 83.6, 92.2];
        let precision = [89.4, 98.2, 99.4, 99.8, 97.2, 96.4, 93.8, 83.9];
        let f1 = [92.6, 98.3, 99.6, 99.6, 97.5, 94.0, 88.4, 87.9];
        for k in 0..8 {
            assert!((cm.recall(k) - recall[k]).abs() <= 0.1);
            assert!((cm.precision(k) - precision[k]).abs() <= 0.1);
            assert!((cm.f1(k) - f1[k]).abs() <= 0.1);
        }
        assert!((cm.macro_f1().unwrap() - 94.7).abs() <= 0.1);
    }

    #[test]
    fn zero_support_class_excluded() {
        let cm = confusion(&[1, 1, 2], &[1, 3, 2]).unwrap();
        // class 3 predicted once but never present
        assert_eq!(cm.precision(2), 0.0);
        assert_eq!(cm.recall(2), 0.0);
        let want = (cm.f1(0) + cm.f1(1)) / 2.0;
        assert_eq!(cm.macro_f1(), Some(want));
        assert!(ConfusionMatrix::default().macro_f1().is_none());
    }

    #[test]
    fn broadcast_fixture() {
        let labels = [1, 1, 1, 1, 1, 1, 2, 2, 2, 2];
        let counts = label_histogram(&labels).unwrap();
        let frame = per_frame_report(&[1], &[1]).unwrap();
        let sample = per_sample_report(&[counts], &[1]).unwrap();
        assert_eq!(frame.accuracy, 100.0);
        assert!((sample.accuracy - 60.0).abs() < 1e-12);
        assert_eq!(sample.confusion.total(), 10);
    }

    #[test]
    fn report_renders() {
        let r = EvalReport::from_confusion(ConfusionMatrix::from_counts(TABLE_III), Unit::Frame).unwrap();
        let table = r.to_table();
        assert!(table.contains("Subway"));
        assert!(table.contains("99.6"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back.confusion, r.confusion);
        assert!((back.macro_f1 - r.macro_f1).abs() < 1e-9);
    }

    fn grid() -> impl Strategy<Value = [[u64; 8]; 8]> {
        proptest::array::uniform8(proptest::array::uniform8(0u64..50))
    }

    proptest! {
        #[test]
        fn percentages_bounded(c in grid()) {
            let cm = ConfusionMatrix::from_counts(c);
            for k in 0..8 {
                for v in [cm.precision(k), cm.recall(k), cm.f1(k)] {
                    prop_assert!((0.0..=100.0).contains(&v));
                }
                let (p, r, f) = (cm.precision(k), cm.recall(k), cm.f1(k));
                prop_assert!(f >= p.min(r) - 1e-9 && f <= p.max(r) + 1e-9);
            }
            prop_assert!((0.0..=100.0).contains(&cm.accuracy()));
        }

        #[test]
        fn macro_f1_relabel_invariant(c in grid(), perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle()) {
            let a = ConfusionMatrix::from_counts(c);
            let mut d = [[0u64; 8]; 8];
            for i in 0..8 {
                for j in 0..8 {
                    d[perm[i]][perm[j]] = c[i][j];
                }
            }
            let b = ConfusionMatrix::from_counts(d);
            match (a.macro_f1(), b.macro_f1()) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn pure_frames_give_identical_units(labels in proptest::collection::vec((1u8..=8, 1u8..=8), 1..40), n in 1u32..20) {
            let truth: Vec<u8> = labels.iter().map(|l| l.0).collect();
            let pred: Vec<u8> = labels.iter().map(|l| l.1).collect();
            let counts: Vec<[u32; 8]> = truth.iter().map(|&t| {
                let mut c = [0; 8];
                c[t as usize - 1] = n;
                c
            }).collect();
            let f = per_frame_report(&truth, &pred).unwrap();
            let s = per_sample_report(&counts, &pred).unwrap();
            prop_assert_eq!(s.confusion.total(), f.confusion.total() * n as u64);
            prop_assert!((f.accuracy - s.accuracy).abs() < 1e-9);
            prop_assert!((f.macro_f1 - s.macro_f1).abs() < 1e-9);
            for (a, b) in f.classes.iter().zip(&s.classes) {
                prop_assert!((a.f1 - b.f1).abs() < 1e-9);
            }
        }
    }
}
