//! Confusion matrices and classification metrics.
//!
//! Binary metrics use the usual TP/TN/FP/FN formulas. The multi-class report
//! uses macro-averaged one-vs-rest precision/recall/F1, Cohen's kappa from the
//! row/column marginals and the K-class Matthews correlation; both of the
//! latter reduce to their binary forms at K = 2.
//!
//! A metric whose denominator is zero is reported as 0 and its name is added
//! to the `degenerate` list.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::class::{BehaviorClass, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("label and prediction lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label {label} outside 0..{k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("binary counts are all zero")]
    EmptyCounts,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("confusion row {0} has no samples")]
    EmptyRow(usize),
}

/// `counts[t][p]` = samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    /// Builds a matrix from `k x k` nested rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        Self { k, counts: rows.iter().flatten().copied().collect() }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize, n: u64) {
        self.counts[truth * self.k + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.k..(truth + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, pred)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                t.counts[j * self.k + i] = self.get(i, j);
            }
        }
        t
    }

    /// One-vs-rest counts for `class`.
    pub fn one_vs_rest(&self, class: usize) -> BinaryCounts {
        let tp = self.get(class, class);
        let fn_ = self.row_sum(class) - tp;
        let fp = self.col_sum(class) - tp;
        BinaryCounts { tp, fp, fn_, tn: self.total() - tp - fp - fn_ }
    }
}

pub fn confusion(truths: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(truths.len(), preds.len()));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truths.iter().zip(preds) {
        for label in [t, p] {
            if label >= k {
                return Err(MetricsError::LabelOutOfRange { label, k });
            }
        }
        cm.add(t, p, 1);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_score: f64,
    pub kappa: f64,
    pub mcc: f64,
    pub degenerate: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        degenerate.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

fn f1(precision: f64, recall: f64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    ratio(2.0 * precision * recall, precision + recall, name, degenerate)
}

pub fn binary_metrics(c: &BinaryCounts) -> Result<BinaryMetrics, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let mut degenerate = Vec::new();
    let accuracy = (tp + tn) / (tp + tn + fp + fn_);
    let precision = ratio(tp, tp + fp, "precision", &mut degenerate);
    let recall = ratio(tp, tp + fn_, "recall", &mut degenerate);
    let f1_score = f1(precision, recall, "f1_score", &mut degenerate);
    let kappa = ratio(
        2.0 * (tp * tn - fn_ * fp),
        (tp + fp) * (fp + tn) + (tp + fn_) * (fn_ + tn),
        "kappa",
        &mut degenerate,
    );
    let mcc = ratio(
        tp * tn - fp * fn_,
        ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt(),
        "mcc",
        &mut degenerate,
    );
    Ok(BinaryMetrics { accuracy, precision, recall, f1_score, kappa, mcc, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1_score: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_score: f64,
    pub kappa: f64,
    pub mcc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion_matrix: Vec<Vec<u64>>,
    /// Row-normalized confusion matrix; rows without samples are all zero.
    pub tpr: Vec<Vec<f64>>,
    pub degenerate: Vec<String>,
}

fn class_label(k: usize, i: usize) -> String {
    if k == NUM_CLASSES {
        BehaviorClass::ALL[i].name().to_string()
    } else {
        i.to_string()
    }
}

pub fn multiclass_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = cm.k;
    let n = total as f64;
    let mut degenerate = Vec::new();
    let accuracy = cm.trace() as f64 / n;

    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let b = cm.one_vs_rest(c);
            let label = class_label(k, c);
            let (tp, fp, fn_) = (b.tp as f64, b.fp as f64, b.fn_ as f64);
            let precision = ratio(tp, tp + fp, &format!("precision[{label}]"), &mut degenerate);
            let recall = ratio(tp, tp + fn_, &format!("recall[{label}]"), &mut degenerate);
            let f1_score = f1(precision, recall, &format!("f1_score[{label}]"), &mut degenerate);
            ClassMetrics { class: label, precision, recall, f1_score, support: b.tp + b.fn_ }
        })
        .collect();
    let kf = k as f64;
    let precision = per_class.iter().map(|c| c.precision).sum::<f64>() / kf;
    let recall = per_class.iter().map(|c| c.recall).sum::<f64>() / kf;
    let f1_score = per_class.iter().map(|c| c.f1_score).sum::<f64>() / kf;

    let rows: Vec<f64> = (0..k).map(|i| cm.row_sum(i) as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| cm.col_sum(j) as f64).collect();
    let po = accuracy;
    let pe = rows.iter().zip(&cols).map(|(r, c)| r * c).sum::<f64>() / (n * n);
    let kappa = ratio(po - pe, 1.0 - pe, "kappa", &mut degenerate);

    let c = cm.trace() as f64;
    let cov_tp = c * n - rows.iter().zip(&cols).map(|(r, c)| r * c).sum::<f64>();
    let cov_pp = n * n - cols.iter().map(|c| c * c).sum::<f64>();
    let cov_tt = n * n - rows.iter().map(|r| r * r).sum::<f64>();
    let mcc = ratio(cov_tp, (cov_pp * cov_tt).sqrt(), "mcc", &mut degenerate);

    // At K = 2 report the binary forms bit for bit (class 1 positive; both
    // scores are symmetric in the class roles).
    let (kappa, mcc) = if k == 2 {
        let b = binary_metrics(&cm.one_vs_rest(1)).expect("non-empty");
        (b.kappa, b.mcc)
    } else {
        (kappa, mcc)
    };

    let tpr = (0..k)
        .map(|t| {
            let r = cm.row_sum(t);
            (0..k).map(|p| if r == 0 { 0.0 } else { cm.get(t, p) as f64 / r as f64 }).collect()
        })
        .collect();

    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1_score,
        kappa,
        mcc,
        per_class,
        confusion_matrix: cm.rows(),
        tpr,
        degenerate,
    })
}

/// Row-normalized confusion matrix; the diagonal is each class's TPR.
pub fn tpr_rows(cm: &ConfusionMatrix) -> Result<Vec<Vec<f64>>, MetricsError> {
    (0..cm.k)
        .map(|t| {
            let r = cm.row_sum(t);
            if r == 0 {
                return Err(MetricsError::EmptyRow(t));
            }
            Ok((0..cm.k).map(|p| cm.get(t, p) as f64 / r as f64).collect())
        })
        .collect()
}

/// Fixed-width text table of the row-normalized matrix.
pub fn render_tpr_table(report: &MetricsReport) -> String {
    let labels: Vec<&str> = report.per_class.iter().map(|c| c.class.as_str()).collect();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:>width$}", "true\\pred");
    for l in &labels {
        let _ = write!(out, " {l:>width$}");
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(&report.tpr) {
        let _ = write!(out, "{l:>width$}");
        for v in row {
            let _ = write!(out, " {v:>width$.4}");
        }
        out.push('\n');
    }
    out
}
