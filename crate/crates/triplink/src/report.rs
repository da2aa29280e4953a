//! Confusion counts, classification metrics, cosine similarity, and
//! evaluation reports.
//!
//! Metric conventions: precision, recall, and F1 are defined as 0 when
//! their denominators vanish, with flags recording that the convention
//! fired. Cosine of a zero vector is 0. Reports store raw fractions;
//! percent formatting happens only in the rendered table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot, l2_norm, Scalar};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("labels and predictions differ in length: {labels} vs {predictions}")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("cannot evaluate an empty input")]
    EmptyInput,
    #[error("confusion matrix is empty (total = 0)")]
    EmptyConfusion,
    #[error("vectors differ in dimension: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialize report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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
}

/// Count outcomes; `true` is the positive (match) class.
pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<ConfusionMatrix, ReportError> {
    if labels.len() != predictions.len() {
        return Err(ReportError::LengthMismatch {
            labels: labels.len(),
            predictions: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut cm = ConfusionMatrix {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for (&label, &pred) in labels.iter().zip(predictions) {
        match (label, pred) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fp += 1,
            (true, false) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the corresponding metric's denominator was 0 and the value
    /// fell back to 0 by convention.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

/// Accuracy = (TP+TN)/total, P = TP/(TP+FP), R = TP/(TP+FN),
/// F1 = 2PR/(P+R); undefined ratios become 0 with their flag set.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, ReportError> {
    let total = cm.total();
    if total == 0 {
        return Err(ReportError::EmptyConfusion);
    }
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    let (precision, precision_undefined) = if cm.tp + cm.fp == 0 {
        (0.0, true)
    } else {
        (cm.tp as f64 / (cm.tp + cm.fp) as f64, false)
    };
    let (recall, recall_undefined) = if cm.tp + cm.fn_ == 0 {
        (0.0, true)
    } else {
        (cm.tp as f64 / (cm.tp + cm.fn_) as f64, false)
    };
    let (f1, f1_undefined) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

/// x . y / (|x| |y|), clamped to [-1, 1]; 0 when either vector is zero.
pub fn cosine_similarity<F: Scalar>(x: &[F], y: &[F]) -> Result<F, ReportError> {
    if x.len() != y.len() {
        return Err(ReportError::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let nx = l2_norm(x);
    let ny = l2_norm(y);
    if nx == F::zero() || ny == F::zero() {
        return Ok(F::zero());
    }
    let one = F::one();
    let cos = dot(x, y) / (nx * ny);
    Ok(cos.max(-one).min(one))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub split_name: String,
    pub model_name: String,
    #[serde(flatten)]
    pub confusion: ConfusionMatrix,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub timestamp: String,
    pub config_digest: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, ReportError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<EvalReport, ReportError> {
        Ok(serde_json::from_str(json)?)
    }
}

fn percent(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Render reports as an aligned text table, one row per report, columns in
/// the order Accuracy, Recall, Precision, F1-score, as percentages.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["Model", "Split", "Accuracy (%)", "Recall (%)", "Precision (%)", "F1-score (%)"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.model_name.clone(),
                r.split_name.clone(),
                percent(r.metrics.accuracy),
                percent(r.metrics.recall),
                percent(r.metrics.precision),
                percent(r.metrics.f1),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String]| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            for _ in cell.len()..*w {
                out.push(' ');
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(&mut out, &header.map(String::from));
    for row in &rows {
        emit(&mut out, row);
    }
    out
}
