//! Accuracy, macro precision/recall/F1 and one-vs-rest ROC curves.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Counts with rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64, what: &str, class: usize) -> f64 {
    if den == 0 {
        warn!("{what} of class {class} has a zero denominator; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics over `max(label, prediction) + 1` classes.
pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    let classes = predictions.iter().chain(labels).max().map_or(0, |m| m + 1);
    compute_metrics_for(predictions, labels, classes)
}

/// Metrics over a fixed number of classes.
pub fn compute_metrics_for(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::Data("metrics over an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return shape_err(format!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Data(format!("class index outside 0..{classes}")));
        }
        counts[y][p] += 1;
    }
    let total = predictions.len() as u64;
    let correct: u64 = (0..classes).map(|c| counts[c][c]).sum();
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = counts[c][c];
        let predicted: u64 = (0..classes).map(|r| counts[r][c]).sum();
        let support: u64 = counts[c].iter().sum();
        let precision = ratio(tp, predicted, "precision", c);
        let recall = ratio(tp, support, "recall", c);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    let k = classes as f64;
    Ok(Metrics {
        accuracy: correct as f64 / total as f64,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
        confusion: ConfusionMatrix { counts },
    })
}

/// One-vs-rest ROC curve of a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            out.push_str(&format!("{f:e},{t:e}\n"));
        }
        out
    }
}

/// ROC curve of `scores` against binary `positive` flags; `None` when one
/// side is empty.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<(Vec<(f64, f64)>, f64)> {
    let p = positive.iter().filter(|b| **b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let (x0, y0) = *points.last().expect("non-empty");
        let pt = (fp as f64 / n as f64, tp as f64 / p as f64);
        auc += (pt.0 - x0) * (pt.1 + y0) / 2.0;
        points.push(pt);
    }
    Some((points, auc))
}

/// Per-class one-vs-rest curves from probability rows. Classes without
/// positives or negatives are skipped with a warning.
pub fn roc_auc(scores: &Tensor, labels: &[usize]) -> Result<Vec<RocCurve>> {
    if scores.rows() != labels.len() {
        return shape_err(format!("{} score rows for {} labels", scores.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::Data("ROC over an empty set".into()));
    }
    let classes = scores.cols();
    let mut curves = Vec::new();
    for c in 0..classes {
        let s: Vec<f64> = (0..labels.len()).map(|i| scores.at(i, c)).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match roc_curve(&s, &pos) {
            Some((points, auc)) => curves.push(RocCurve { class: c, points, auc }),
            None => warn!("class {c} lacks positives or negatives; ROC curve omitted"),
        }
    }
    Ok(curves)
}
