//! Confusion matrices and macro-averaged classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{truths} truths but {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("confusion matrix has no entries")]
    EmptyMatrix,
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion(truths: &[usize], predictions: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch {
            truths: truths.len(),
            predictions: predictions.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truths.iter().zip(predictions) {
        for label in [t, p] {
            if label >= k {
                return Err(MetricsError::LabelOutOfRange { label, classes: k });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `(TP + TN) / total` for this class.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub accuracy: f64,
    pub macro_pr: f64,
    pub macro_rc: f64,
    pub macro_f1: f64,
    /// Mean of per-class `(TP + TN) / total`; an alternative reading of a
    /// "macro accuracy".
    pub macro_ac_alt: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class precision, recall and F1 (0 on zero denominators) and their
/// unweighted means.
pub fn macro_report(cm: &ConfusionMatrix) -> Result<MacroReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = cm.classes();
    let n = total as f64;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let row: u64 = cm.counts[c].iter().sum();
        let col: u64 = cm.counts.iter().map(|r| r[c]).sum();
        let fn_ = row as f64 - tp;
        let fp = col as f64 - tp;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        let tn = n - tp - fp - fn_;
        per_class.push(ClassMetrics {
            class: c,
            support: row,
            precision,
            recall,
            f1,
            accuracy: (tp + tn) / n,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let trace: u64 = (0..k).map(|c| cm.counts[c][c]).sum();
    Ok(MacroReport {
        accuracy: trace as f64 / n,
        macro_pr: mean(|m| m.precision),
        macro_rc: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        macro_ac_alt: mean(|m| m.accuracy),
        per_class,
    })
}

impl MacroReport {
    /// Aligned plain-text table, one row per class plus a macro row.
    pub fn table(&self, names: Option<&[String]>) -> String {
        let label = |c: usize| match names {
            Some(n) if c < n.len() => n[c].clone(),
            _ => c.to_string(),
        };
        let width = (0..self.per_class.len()).map(|c| label(c).len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>9}  {:>6}  {:>6}  {:>6}",
            "class", "support", "precision", "recall", "f1", "ac"
        );
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>9.4}  {:>6.4}  {:>6.4}  {:>6.4}",
                label(m.class),
                m.support,
                m.precision,
                m.recall,
                m.f1,
                m.accuracy
            );
        }
        let support: u64 = self.per_class.iter().map(|m| m.support).sum();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>9.4}  {:>6.4}  {:>6.4}  {:>6.4}",
            "macro", support, self.macro_pr, self.macro_rc, self.macro_f1, self.macro_ac_alt
        );
        let _ = writeln!(out, "accuracy {:.4}", self.accuracy);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[0, 1], &[0, 1], 2).unwrap().counts, vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert_eq!(
            confusion(&[2], &[0], 2),
            Err(MetricsError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }

    #[test]
    fn perfect_and_worked_examples() {
        let r = macro_report(&ConfusionMatrix {
            counts: vec![vec![5, 0], vec![0, 5]],
        })
        .unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));

        let r = macro_report(&ConfusionMatrix {
            counts: vec![vec![3, 1], vec![2, 4]],
        })
        .unwrap();
        assert!((r.per_class[0].precision - 0.6).abs() < 1e-12);
        assert!((r.per_class[1].precision - 0.8).abs() < 1e-12);
        assert!((r.per_class[0].recall - 0.75).abs() < 1e-12);
        assert!((r.per_class[1].recall - 4.0 / 6.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.6970).abs() < 1e-4);
        assert!((r.accuracy - 0.7).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero() {
        let r = macro_report(&ConfusionMatrix {
            counts: vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]],
        })
        .unwrap();
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_report(&ConfusionMatrix::zeros(2)), Err(MetricsError::EmptyMatrix));
    }

    #[test]
    fn table_lists_every_class() {
        let r = macro_report(&ConfusionMatrix {
            counts: vec![vec![3, 1], vec![2, 4]],
        })
        .unwrap();
        let names = vec!["chat".to_string(), "video".to_string()];
        let t = r.table(Some(&names));
        assert!(t.contains("chat") && t.contains("video") && t.contains("macro"));
        assert_eq!(t.lines().count(), 5);
    }
}
