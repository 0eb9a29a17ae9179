//! Multi-class evaluation: confusion matrix plus macro-averaged accuracy,
//! precision, recall, specificity and F1 from one-vs-rest counts.

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

/// Square count matrix, rows indexed by true label, columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn count(&self, true_idx: usize, pred_idx: usize) -> u64 {
        self.counts[true_idx][pred_idx]
    }

    /// Plain-text rendering with labelled rows (true) and columns (predicted).
    pub fn to_table(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(|l| l.len())
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(4);
        let mut out = String::new();
        out.push_str(&format!("{:>w$} ", "t\\p", w = width));
        for label in &self.labels {
            out.push_str(&format!("{label:>w$} ", w = width));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:>w$} ", self.labels[i], w = width));
            for c in row {
                out.push_str(&format!("{c:>w$} ", w = width));
            }
            out.push('\n');
        }
        out
    }
}

/// One-vs-rest metrics for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
}

/// Per-class metrics plus their unweighted (macro) means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
    pub per_class: Vec<(String, ClassMetrics)>,
    /// Classes whose precision, recall or F1 hit the 0/0 case and were
    /// defined as 0 by convention.
    pub degenerate_classes: Vec<String>,
}

impl MetricReport {
    /// Aligned text table in ACC / P / R / S / F1 column order.
    pub fn to_table(&self) -> String {
        let name_w = self
            .per_class
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            "class", "ACC", "P", "R", "S", "F1"
        ));
        out.push_str(&format!(
            "{:<name_w$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}\n",
            "macro",
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_specificity,
            self.macro_f1
        ));
        for (name, m) in &self.per_class {
            out.push_str(&format!(
                "{:<name_w$}  {:>6}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}\n",
                name, "-", m.precision, m.recall, m.specificity, m.f1
            ));
        }
        out
    }
}

/// Count (truth, prediction) pairs into a confusion matrix over `labels`.
pub fn confusion(
    truths: &[String],
    preds: &[String],
    labels: &[String],
) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(truths.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::BadLabels);
    }
    let index_of = |label: &String| {
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| MetricsError::UnknownLabel(label.clone()))
    };
    {
        let mut seen = std::collections::HashSet::new();
        if !labels.iter().all(|l| seen.insert(l)) {
            return Err(MetricsError::BadLabels);
        }
    }
    let n = labels.len();
    let mut counts = vec![vec![0u64; n]; n];
    for (t, p) in truths.iter().zip(preds) {
        counts[index_of(t)?][index_of(p)?] += 1;
    }
    Ok(ConfusionMatrix { labels: labels.to_vec(), counts })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Derive the metric report from a confusion matrix. 0/0 ratios in P, R or
/// F1 are defined as 0 and the class is flagged as degenerate; specificity
/// is computed normally.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricReport, MetricsError> {
    let total = cm.total();
    if total == 0 || cm.labels.is_empty() {
        return Err(MetricsError::EmptyMatrix);
    }
    let n = cm.labels.len();
    let trace: u64 = (0..n).map(|i| cm.count(i, i)).sum();
    let accuracy = trace as f64 / total as f64;

    let mut per_class = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for c in 0..n {
        let tp: u64 = cm.count(c, c);
        let fp: u64 = (0..n).filter(|&r| r != c).map(|r| cm.count(r, c)).sum();
        let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| cm.count(c, p)).sum();
        let tn: u64 = total - tp - fp - fn_;

        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let specificity = ratio(tn, tn + fp).unwrap_or(0.0);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(0.0), Some(0.0)) => Some(0.0),
            _ => None,
        };
        if precision.is_none() || recall.is_none() || f1.is_none() {
            degenerate.push(cm.labels[c].clone());
        }
        per_class.push((
            cm.labels[c].clone(),
            ClassMetrics {
                precision: precision.unwrap_or(0.0),
                recall: recall.unwrap_or(0.0),
                specificity,
                f1: f1.unwrap_or(0.0),
            },
        ));
    }

    let mean = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|(_, m)| f(m)).sum::<f64>() / n as f64
    };
    Ok(MetricReport {
        accuracy,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_specificity: mean(|m| m.specificity),
        macro_f1: mean(|m| m.f1),
        per_class,
        degenerate_classes: degenerate,
    })
}
