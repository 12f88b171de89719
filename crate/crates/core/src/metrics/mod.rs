//! Overlap metrics for binary masks, brain = 1 as the positive class.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Pools counts, e.g. over all slices of one subject.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Tallies `pred` against `gt`; both must be same-shaped {0,1} masks.
pub fn confusion_counts(pred: &Tensor<u8>, gt: &Tensor<u8>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Data(format!("mask shapes differ: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    // Index 2·pred + gt: 0 = TN, 1 = FN, 2 = FP, 3 = TP.
    let mut bins = [0u64; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p > 1 || g > 1 {
            return Err(Error::Data(format!("mask value {} is not binary", p.max(g))));
        }
        bins[(2 * p + g) as usize] += 1;
    }
    Ok(ConfusionCounts { tn: bins[0], fn_: bins[1], fp: bins[2], tp: bins[3] })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

/// Ratios with a vanishing denominator are 1: both masks empty for Dice, no
/// positives for sensitivity, no negatives for specificity.
pub fn segmentation_metrics(c: &ConfusionCounts) -> Result<SegmentationMetrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Data("no pixels were compared".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(SegmentationMetrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        accuracy: (c.tp + c.tn) as f64 / total as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub subject: String,
    #[serde(flatten)]
    pub metrics: SegmentationMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation; the SD of a single or constant list is 0.
    pub fn of(values: &[f64]) -> Result<MeanSd> {
        if values.is_empty() {
            return Err(Error::Data("cannot summarize an empty list".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        // Rounding in the mean must not leak a spread into constant lists.
        let sd = if values.iter().all(|&v| v == values[0]) {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(MeanSd { mean, sd })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub count: usize,
    pub dice: MeanSd,
    pub sensitivity: MeanSd,
    pub specificity: MeanSd,
    pub accuracy: MeanSd,
}

pub fn aggregate_stats(records: &[MetricsRecord]) -> Result<AggregateStats> {
    let pick =
        |f: fn(&SegmentationMetrics) -> f64| MeanSd::of(&records.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    Ok(AggregateStats {
        count: records.len(),
        dice: pick(|m| m.dice)?,
        sensitivity: pick(|m| m.sensitivity)?,
        specificity: pick(|m| m.specificity)?,
        accuracy: pick(|m| m.accuracy)?,
    })
}
