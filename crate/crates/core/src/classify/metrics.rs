use serde::{Deserialize, Serialize};

use crate::data::Stage;
use crate::error::{Error, Result};

/// Square count matrix, rows indexed by true class and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion { counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if let Some(row) = counts.iter().find(|r| r.len() != k) {
            return Err(Error::Shape {
                expected: vec![k, k],
                actual: vec![k, row.len()],
            });
        }
        Ok(Confusion { counts })
    }

    pub fn from_stages(truth: &[Stage], predicted: &[Stage]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape {
                expected: vec![truth.len()],
                actual: vec![predicted.len()],
            });
        }
        let mut c = Confusion::new(Stage::ALL.len());
        for (t, p) in truth.iter().zip(predicted) {
            c.record(t.ordinal(), p.ordinal());
        }
        Ok(c)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    /// Per-class counts of true labels.
    pub fn true_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Per-class counts of predictions.
    pub fn predicted_totals(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64
    }

    /// Sum of element-wise counts of `other` into `self`.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Shape {
                expected: vec![self.classes(); 2],
                actual: vec![other.classes(); 2],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Per-class precision, recall and F1. Undefined ratios are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn class_scores(c: &Confusion) -> Vec<ClassScores> {
    let truth = c.true_totals();
    let pred = c.predicted_totals();
    (0..c.classes())
        .map(|k| {
            let tp = c.counts[k][k] as f64;
            let precision = if pred[k] == 0 { 0.0 } else { tp / pred[k] as f64 };
            let recall = if truth[k] == 0 { 0.0 } else { tp / truth[k] as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores { precision, recall, f1 }
        })
        .collect()
}

/// Classes that occur among the true labels or the predictions.
fn active_classes(c: &Confusion) -> Vec<usize> {
    let truth = c.true_totals();
    let pred = c.predicted_totals();
    (0..c.classes()).filter(|&k| truth[k] + pred[k] > 0).collect()
}

/// Unweighted means of precision, recall and F1 over the active classes.
pub fn macro_scores(c: &Confusion) -> ClassScores {
    let scores = class_scores(c);
    let active = active_classes(c);
    if active.is_empty() {
        return ClassScores { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let n = active.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| active.iter().map(|&k| f(&scores[k])).sum::<f64>() / n;
    ClassScores {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
    }
}

/// F1 from pooled true positives, false positives and false negatives.
pub fn f1_micro(c: &Confusion) -> f64 {
    let tp = c.trace() as f64;
    let total = c.total() as f64;
    let fp = total - tp;
    let fn_ = total - tp;
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// Matthews correlation generalised to `K` classes; 0 when either marginal
/// is degenerate.
pub fn mcc_multiclass(counts: &[Vec<u64>]) -> f64 {
    let k = counts.len();
    let s: i128 = counts.iter().flatten().map(|&v| v as i128).sum();
    let c: i128 = (0..k).map(|i| counts[i][i] as i128).sum();
    let t: Vec<i128> = counts.iter().map(|r| r.iter().map(|&v| v as i128).sum()).collect();
    let p: Vec<i128> = (0..k)
        .map(|j| counts.iter().map(|r| r[j] as i128).sum())
        .collect();
    let pt: i128 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let var_p = s * s - p.iter().map(|v| v * v).sum::<i128>();
    let var_t = s * s - t.iter().map(|v| v * v).sum::<i128>();
    if var_p <= 0 || var_t <= 0 {
        return 0.0;
    }
    (c * s - pt) as f64 / ((var_p as f64) * (var_t as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub mcc: f64,
    pub confusion: Confusion,
    pub seeds: Vec<u64>,
    /// How per-class scores were averaged.
    pub averaging: String,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion, seeds: Vec<u64>) -> Self {
        let m = macro_scores(&confusion);
        MetricsReport {
            accuracy: confusion.accuracy(),
            f1_macro: m.f1,
            precision_macro: m.precision,
            recall_macro: m.recall,
            mcc: mcc_multiclass(&confusion.counts),
            confusion,
            seeds,
            averaging: "macro".into(),
        }
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::F1 => self.f1_macro,
            Metric::Precision => self.precision_macro,
            Metric::Recall => self.recall_macro,
            Metric::Mcc => self.mcc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    Precision,
    Recall,
    Mcc,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Accuracy, Metric::F1, Metric::Precision, Metric::Recall, Metric::Mcc];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Mcc => "mcc",
        }
    }
}

/// `mean ± z·std/√n`.
pub fn confidence_interval(mean: f64, std: f64, z: f64, n: usize) -> (f64, f64) {
    let half = z * std / (n as f64).sqrt();
    (mean - half, mean + half)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub z: f64,
    /// Divisor used inside the interval half-width.
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64], z: f64, n_override: Option<usize>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Invalid(format!(
                "at least 2 values are needed for a spread, got {}",
                values.len()
            )));
        }
        let n = n_override.unwrap_or(values.len());
        if n == 0 {
            return Err(Error::Invalid("interval divisor must be positive".into()));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        let std = var.sqrt();
        let (ci_low, ci_high) = confidence_interval(mean, std, z, n);
        Ok(MetricSummary { mean, std, z, n, ci_low, ci_high })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedReport {
    pub accuracy: MetricSummary,
    pub f1_macro: MetricSummary,
    pub precision_macro: MetricSummary,
    pub recall_macro: MetricSummary,
    pub mcc: MetricSummary,
    /// Element-wise sum of the per-seed confusions.
    pub confusion: Confusion,
    pub seeds: Vec<u64>,
    pub reports: usize,
}

impl AggregatedReport {
    pub fn summary(&self, metric: Metric) -> &MetricSummary {
        match metric {
            Metric::Accuracy => &self.accuracy,
            Metric::F1 => &self.f1_macro,
            Metric::Precision => &self.precision_macro,
            Metric::Recall => &self.recall_macro,
            Metric::Mcc => &self.mcc,
        }
    }
}

/// Mean, sample deviation and `z` interval of every metric across seeds.
/// `n_override` replaces the report count inside the interval width.
pub fn aggregate_seeds(reports: &[MetricsReport], z: f64, n_override: Option<usize>) -> Result<AggregatedReport> {
    if reports.len() < 2 {
        return Err(Error::Invalid(format!(
            "aggregation needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let summary = |m: Metric| {
        let values: Vec<f64> = reports.iter().map(|r| r.metric(m)).collect();
        MetricSummary::from_values(&values, z, n_override)
    };
    let mut confusion = Confusion::new(reports[0].confusion.classes());
    for r in reports {
        confusion.merge(&r.confusion)?;
    }
    Ok(AggregatedReport {
        accuracy: summary(Metric::Accuracy)?,
        f1_macro: summary(Metric::F1)?,
        precision_macro: summary(Metric::Precision)?,
        recall_macro: summary(Metric::Recall)?,
        mcc: summary(Metric::Mcc)?,
        confusion,
        seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        reports: reports.len(),
    })
}
