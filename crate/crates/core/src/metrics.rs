//! Confusion matrix, the four classification metrics and multi-model comparison tables.
//!
//! The positive class is label 1 (malignant).

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const POSITIVE_LABEL: usize = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, pred: usize, truth: usize) {
        match (pred == POSITIVE_LABEL, truth == POSITIVE_LABEL) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

pub fn confusion(pred: &[usize], truth: &[usize]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if p > 1 || t > 1 {
            return Err(Error::Label(format!("sample {i}: labels must be 0 or 1, got {p}/{t}")));
        }
        cm.record(p, t);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

fn ratio(num: f64, den: f64, what: &str) -> f64 {
    if den == 0.0 {
        log::warn!("{what} is 0/0; reporting 0");
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * recall * precision, recall + precision, "f1")
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Input("cannot report on an empty confusion matrix".into()));
    }
    let (tp, tn, fp, fn_) = (cm.tp as f64, cm.tn as f64, cm.fp as f64, cm.fn_ as f64);
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + fn_, "recall");
    Ok(MetricsReport {
        accuracy: (tp + tn) / cm.total() as f64,
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// JSON object with the four metrics and the embedded confusion counts.
pub fn report_json(report: &MetricsReport, cm: &ConfusionMatrix) -> Value {
    json!({
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "confusion": cm,
    })
}

/// Metrics as rows, models as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    /// `values[metric][model]`, rows ordered as [`METRIC_NAMES`].
    pub values: Vec<Vec<f64>>,
}

pub fn comparison_table(results: &[(String, MetricsReport)]) -> Result<ComparisonTable> {
    if results.is_empty() {
        return Err(Error::Input("comparison table needs at least one model".into()));
    }
    let mut models: Vec<String> = Vec::with_capacity(results.len());
    for (k, (name, _)) in results.iter().enumerate() {
        let base = if name.trim().is_empty() {
            format!("model-{}", k + 1)
        } else {
            name.clone()
        };
        let mut candidate = base.clone();
        let mut n = 2;
        while models.contains(&candidate) {
            candidate = format!("{base}-{n}");
            n += 1;
        }
        if candidate != base {
            log::warn!("duplicate model name {base:?} renamed to {candidate:?}");
        }
        models.push(candidate);
    }
    let values = (0..METRIC_NAMES.len())
        .map(|m| results.iter().map(|(_, r)| r.values()[m]).collect())
        .collect();
    Ok(ComparisonTable { models, values })
}

fn round5(v: f64) -> f64 {
    (v * 1e5).round() / 1e5
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for m in &self.models {
            out.push(',');
            out.push_str(&csv_field(m));
        }
        out.push('\n');
        for (name, row) in METRIC_NAMES.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v:.5}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Vec<f64>> = self
            .values
            .iter()
            .map(|r| r.iter().copied().map(round5).collect())
            .collect();
        json!({
            "models": self.models,
            "metrics": METRIC_NAMES,
            "values": rows,
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
