//! Evaluation metrics on the minority (defaulting) class, per-group
//! breakdowns under domain shift, and the train→test decreasing rates.

use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, ShiftGroups};
use crate::model::Checkpoint;

use super::TrainError;

pub const EVAL_BATCH: usize = 256;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.false_negatives + self.true_negatives
    }

    /// Recall on the positive class; 0 when no positives exist.
    pub fn recall(&self) -> f64 {
        let denom = self.true_positives + self.false_negatives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        let denom = self.true_positives + self.false_positives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// True when the evaluated set had no positive rows at all.
    pub fn no_positives(&self) -> bool {
        self.true_positives + self.false_negatives == 0
    }
}

/// Counts predictions (ŷ ≥ threshold ⇒ defaulting) against labels.
pub fn confusion(probabilities: &[f64], labels: &[u8], threshold: f64) -> ConfusionCounts {
    debug_assert_eq!(probabilities.len(), labels.len());
    let mut c = ConfusionCounts {
        true_positives: 0,
        false_positives: 0,
        false_negatives: 0,
        true_negatives: 0,
    };
    for (&p, &y) in probabilities.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, y == 1) {
            (true, true) => c.true_positives += 1,
            (true, false) => c.false_positives += 1,
            (false, true) => c.false_negatives += 1,
            (false, false) => c.true_negatives += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub size: usize,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Rates {
    pub recall: f64,
    pub f1: f64,
}

/// Plot-ready metric summary for the defaulting class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub class: String,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Set when the evaluated set had no positive rows.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_positives: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<Rates>,
}

impl MetricReport {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        MetricReport {
            class: "defaulting".to_string(),
            recall: c.recall(),
            precision: c.precision(),
            f1: c.f1(),
            no_positives: c.no_positives(),
            groups: None,
            rates: None,
        }
    }
}

/// Probabilities of the defaulting class for every row of a dataset.
pub fn predict_probabilities(
    checkpoint: &Checkpoint,
    dataset: &DomainDataset,
) -> Result<Vec<f64>, TrainError> {
    let outputs = checkpoint.infer_dataset(dataset, EVAL_BATCH)?;
    Ok(outputs
        .into_iter()
        .flat_map(|o| o.probabilities)
        .collect())
}

/// Evaluates a labeled dataset at the given threshold.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &DomainDataset,
    threshold: f64,
) -> Result<(ConfusionCounts, MetricReport), TrainError> {
    let labels = dataset.labels().ok_or(TrainError::UnlabeledDataset)?;
    if dataset.n_rows() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let probs = predict_probabilities(checkpoint, dataset)?;
    let counts = confusion(&probs, labels, threshold);
    Ok((counts, MetricReport::from_counts(&counts)))
}

/// Evaluates the full target plus each shift group, ordered as the
/// groups were built (largest first by default).
pub fn evaluate_groups(
    checkpoint: &Checkpoint,
    target: &DomainDataset,
    groups: &ShiftGroups,
    threshold: f64,
) -> Result<MetricReport, TrainError> {
    let labels = target.labels().ok_or(TrainError::UnlabeledDataset)?;
    let available: std::collections::HashSet<&str> =
        target.circle_ids().iter().map(String::as_str).collect();
    for g in &groups.groups {
        if let Some(missing) = g
            .circle_ids
            .iter()
            .find(|id| !available.contains(id.as_str()))
        {
            return Err(TrainError::CircleMismatch {
                circle: missing.clone(),
            });
        }
    }

    let probs = predict_probabilities(checkpoint, target)?;
    let overall = confusion(&probs, labels, threshold);
    let mut report = MetricReport::from_counts(&overall);

    let mut group_metrics = Vec::with_capacity(groups.groups.len());
    for g in &groups.groups {
        let rows = groups.group_rows(g, target);
        let gp: Vec<f64> = rows.iter().map(|&i| probs[i]).collect();
        let gl: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
        let counts = confusion(&gp, &gl, threshold);
        group_metrics.push(GroupMetrics {
            size: g.size,
            recall: counts.recall(),
            f1: counts.f1(),
        });
    }
    report.groups = Some(group_metrics);
    Ok(report)
}

/// Relative drop from training to testing: (training − testing)/testing.
pub fn decreasing_rate(training: f64, testing: f64) -> Result<f64, TrainError> {
    if testing <= 0.0 {
        return Err(TrainError::ZeroTestingMetric);
    }
    Ok((training - testing) / testing)
}

/// Decreasing rates of recall and F1 between two reports.
pub fn decreasing_rates(
    training: &MetricReport,
    testing: &MetricReport,
) -> Result<Rates, TrainError> {
    Ok(Rates {
        recall: decreasing_rate(training.recall, testing.recall)?,
        f1: decreasing_rate(training.f1, testing.f1)?,
    })
}
