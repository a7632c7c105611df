//! Two-class confusion matrices and macro-averaged metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CLASSES;

/// `counts[true][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASSES]; CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASSES).map(|c| self.counts[c][c]).sum()
    }

    /// Matrix with both class labels exchanged.
    pub fn swapped(&self) -> Self {
        let [[a, b], [c, d]] = self.counts;
        Self { counts: [[d, c], [b, a]] }
    }
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::DegenerateInput("no predictions to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= CLASSES || t >= CLASSES {
            return Err(Error::InvalidInput(format!("class id out of range: predicted {p}, true {t}")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus unweighted class means of precision, recall and F1.
/// F1 is averaged per class, not recomputed from the macro precision and
/// recall. A class with no predicted (or no actual) instances scores 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::DegenerateInput("confusion matrix is empty".into()));
    }
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..CLASSES {
        let tp = cm.counts[c][c];
        let predicted: u64 = (0..CLASSES).map(|t| cm.counts[t][c]).sum();
        let actual: u64 = cm.counts[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let k = CLASSES as f64;
    Ok(Metrics {
        accuracy: ratio(cm.trace(), total),
        precision: p_sum / k,
        recall: r_sum / k,
        f1: f_sum / k,
    })
}

pub fn metrics_json(m: &Metrics) -> String {
    serde_json::to_string_pretty(m).expect("metrics serialize")
}

/// Human-readable rows, one per method:
///
/// ```text
/// Method                  Accuracy  Precision  Recall  F1-score
/// tractgraphcnn (wmg)       0.8500     0.8535  0.8500    0.8496
/// ```
pub fn metrics_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    writeln!(out, "{:<width$}  Accuracy  Precision  Recall  F1-score", "Method").unwrap();
    for (name, m) in rows {
        writeln!(
            out,
            "{name:<width$}  {:>8.4}  {:>9.4}  {:>6.4}  {:>8.4}",
            m.accuracy, m.precision, m.recall, m.f1
        )
        .unwrap();
    }
    out
}
