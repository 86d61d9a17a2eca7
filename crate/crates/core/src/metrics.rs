//! Classification metrics: accuracy, confusion matrix, per-class precision,
//! recall and F1, and micro-averaged ROC AUC.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LabelMap;
use crate::nn::Model;
use crate::preprocess::EncodedBatch;

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let c = self.num_classes();
        (0..c)
            .map(|p| self.counts.iter().map(|r| r[p]).sum())
            .collect()
    }

    /// Row-normalized percentages; all-zero rows stay zero.
    pub fn row_normalized_percent(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| {
                        if n == 0 {
                            0.0
                        } else {
                            100.0 * v as f64 / n as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// CSV with a `true\predicted` header row and one row per true class.
    pub fn write_csv<W: Write>(&self, labels: &LabelMap, normalized: bool, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\predicted".to_owned()];
        header.extend(labels.labels().iter().cloned());
        w.write_record(&header)?;
        let pct = self.row_normalized_percent();
        for (t, row) in self.counts.iter().enumerate() {
            let mut fields = vec![labels.label(t).unwrap_or_default().to_owned()];
            if normalized {
                fields.extend(pct[t].iter().map(|v| format!("{v:.2}")));
            } else {
                fields.extend(row.iter().map(u64::to_string));
            }
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_range(values: &[usize], classes: usize, what: &str) -> Result<()> {
    match values.iter().find(|&&v| v >= classes) {
        Some(v) => Err(Error::InvalidArgument(format!(
            "{what} {v} out of range for {classes} classes"
        ))),
        None => Ok(()),
    }
}

pub fn confusion(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    check_range(labels, num_classes, "label")?;
    check_range(predictions, num_classes, "prediction")?;
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Fraction of exact matches. Empty input has accuracy 0.
pub fn accuracy(labels: &[usize], predictions: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .zip(predictions)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class scores; any zero denominator yields 0.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> ClassScores {
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut scores = ClassScores {
        precision: Vec::new(),
        recall: Vec::new(),
        f1: Vec::new(),
    };
    for c in 0..cm.num_classes() {
        let p = ratio(cm.counts[c][c], cols[c]);
        let r = ratio(cm.counts[c][c], rows[c]);
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        scores.precision.push(p);
        scores.recall.push(r);
        scores.f1.push(f);
    }
    scores
}

/// Micro-averaged one-vs-rest ROC AUC.
///
/// All `B*C` (score, is-true-class) pairs are pooled and scored with the
/// Mann-Whitney statistic; tied scores count one half. Computed by sorting
/// and mid-ranking, with the rank sum kept in exact integer half-units.
pub fn micro_average_auc(labels: &[usize], probs: ArrayView2<'_, f64>) -> Result<f64> {
    let (b, c) = probs.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    if c < 2 {
        return Err(Error::InvalidArgument(
            "AUC needs at least 2 classes".into(),
        ));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("AUC of an empty set".into()));
    }
    check_range(labels, c, "label")?;
    if probs.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }

    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(b * c);
    for (i, row) in probs.rows().into_iter().enumerate() {
        for (k, &s) in row.iter().enumerate() {
            pairs.push((s, labels[i] == k));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));

    let positives = b as u128;
    let negatives = (b * c - b) as u128;
    // Twice the positive rank sum; mid-rank of ranks lo+1..=hi is (lo+1+hi)/2.
    let mut twice_rank_sum: u128 = 0;
    let mut lo = 0;
    while lo < pairs.len() {
        let mut hi = lo + 1;
        while hi < pairs.len() && pairs[hi].0 == pairs[lo].0 {
            hi += 1;
        }
        let pos_in_group = pairs[lo..hi].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += pos_in_group * (lo as u128 + 1 + hi as u128);
        lo = hi;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub samples: usize,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub micro_auc: f64,
    pub confusion: ConfusionMatrix,
    /// Row-normalized confusion matrix in percent.
    pub confusion_percent: Vec<Vec<f64>>,
}

impl MetricsReport {
    pub fn from_predictions(
        labels: &LabelMap,
        truth: &[usize],
        probs: ArrayView2<'_, f64>,
    ) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot evaluate an empty test set".into(),
            ));
        }
        if probs.ncols() != labels.len() {
            return Err(Error::Shape(format!(
                "{} probability columns for {} labels",
                probs.ncols(),
                labels.len()
            )));
        }
        let predictions = argmax_rows(probs);
        let cm = confusion(truth, &predictions, labels.len())?;
        let scores = precision_recall_f1(&cm);
        Ok(Self {
            labels: labels.labels().to_vec(),
            samples: truth.len(),
            accuracy: cm.trace() as f64 / cm.total() as f64,
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            micro_auc: micro_average_auc(truth, probs)?,
            confusion_percent: cm.row_normalized_percent(),
            confusion: cm,
        })
    }

    /// `label,precision,recall,f1,support` rows.
    pub fn write_class_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["host", "precision", "recall", "f1", "support"])?;
        let support = self.confusion.row_sums();
        for (c, label) in self.labels.iter().enumerate() {
            w.write_record([
                label.clone(),
                format!("{:.4}", self.precision[c]),
                format!("{:.4}", self.recall[c]),
                format!("{:.4}", self.f1[c]),
                support[c].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: PartialOrd + Copy>(probs: ArrayView2<'_, T>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn to_f64<T: crate::nn::Float>(a: &Array2<T>) -> Array2<f64> {
    a.mapv(|v| v.to_f64().unwrap())
}

/// Runs `model` in inference mode over `data` and scores the predictions.
pub fn evaluate(
    model: &Model<f32>,
    labels: &LabelMap,
    data: &EncodedBatch<f32>,
) -> Result<MetricsReport> {
    if labels.len() != model.config.num_classes {
        return Err(Error::Config(format!(
            "label map has {} hosts, model predicts {}",
            labels.len(),
            model.config.num_classes
        )));
    }
    let probs = crate::trainer::predict_proba(model, data.inputs.view(), 128)?;
    MetricsReport::from_predictions(labels, &data.labels, to_f64(&probs).view())
}
