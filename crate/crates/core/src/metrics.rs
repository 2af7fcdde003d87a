//! Evaluation metrics. CORRECT is the positive class; labels come from
//! [`Prediction`], so every model shares one binarization rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prediction::{Label, Prediction};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {labels} labels vs {predictions} predictions")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_lengths(labels: usize, predictions: usize) -> Result<(), MetricError> {
    if labels != predictions {
        return Err(MetricError::LengthMismatch { labels, predictions });
    }
    if labels == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn confusion(labels: &[bool], predicted: &[Label]) -> Result<ConfusionCounts, MetricError> {
    check_lengths(labels.len(), predicted.len())?;
    let mut c = ConfusionCounts::default();
    for (&truth, &pred) in labels.iter().zip(predicted) {
        match (truth, pred.is_correct()) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Components whose denominator was zero; each was reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degeneracy {
    pub precision: bool,
    pub recall: bool,
    pub specificity: bool,
    pub f1: bool,
}

impl Degeneracy {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.specificity || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Degeneracy,
}

fn safe_ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let mut degenerate = Degeneracy::default();
    let total = c.total();
    let accuracy = if total == 0 {
        0.0
    } else {
        (c.tp + c.tn) as f64 / total as f64
    };
    let recall = safe_ratio(c.tp, c.tp + c.fn_, &mut degenerate.recall);
    let specificity = safe_ratio(c.tn, c.tn + c.fp, &mut degenerate.specificity);
    let precision = safe_ratio(c.tp, c.tp + c.fp, &mut degenerate.precision);
    let f1 = safe_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, &mut degenerate.f1);
    // sklearn flags zero-TP precision/recall/F1 as ill-defined too
    if c.tp == 0 {
        degenerate.precision = true;
        degenerate.recall = true;
        degenerate.f1 = true;
    }
    ClassificationMetrics {
        accuracy,
        balanced_accuracy: 0.5 * (recall + specificity),
        precision,
        recall,
        f1,
        degenerate,
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic: the share of
/// (positive, negative) pairs where the positive scores higher, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    check_lengths(labels.len(), scores.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum keeps tied average ranks integral
    let mut pos_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1, average (i + j + 2) / 2
        let avg_x2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank_sum_x2 += avg_x2 * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let u_x2 = pos_rank_sum_x2 - n_pos * (n_pos + 1);
    Ok(u_x2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

pub fn rmse(labels: &[bool], probs: &[f64]) -> Result<f64, MetricError> {
    check_lengths(labels.len(), probs.len())?;
    let sq: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&l, &p)| {
            let y = if l { 1.0 } else { 0.0 };
            (y - p) * (y - p)
        })
        .sum();
    Ok((sq / labels.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub f1: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_points: usize,
    pub failure_count: usize,
    pub confusion: ConfusionCounts,
    pub degenerate: Degeneracy,
}

/// All seven metrics over the successfully predicted points. `failures`
/// counts points that produced no prediction; they are reported but not
/// scored.
pub fn metric_report(
    labels: &[bool],
    predictions: &[Prediction],
    failures: usize,
) -> Result<MetricReport, MetricError> {
    check_lengths(labels.len(), predictions.len())?;
    let predicted: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let probs: Vec<f64> = predictions.iter().map(|p| p.p_correct).collect();
    let c = confusion(labels, &predicted)?;
    let m = classification_metrics(&c);
    Ok(MetricReport {
        auc: auc(labels, &probs)?,
        f1: m.f1,
        rmse: rmse(labels, &probs)?,
        accuracy: m.accuracy,
        balanced_accuracy: m.balanced_accuracy,
        precision: m.precision,
        recall: m.recall,
        n_points: labels.len(),
        failure_count: failures,
        confusion: c,
        degenerate: m.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    fn preds(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&x| Label::from_correct(x == 1)).collect()
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&labels(&[1, 0]), &preds(&[1, 0])).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                tn: 1,
                fp: 0,
                fn_: 0
            }
        );

        let c = confusion(&labels(&[1, 1, 1, 1, 0, 0, 0, 0]), &preds(&[1, 1, 0, 0, 0, 0, 0, 1])).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 2,
                tn: 3,
                fp: 1,
                fn_: 2
            }
        );

        let c = confusion(&labels(&[1, 1, 1]), &preds(&[1, 1, 1])).unwrap();
        assert_eq!((c.fp, c.fn_, c.tn), (0, 0, 0));

        assert!(matches!(
            confusion(&labels(&[1]), &preds(&[1, 0])),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn classification_examples() {
        let m = classification_metrics(&ConfusionCounts {
            tp: 2,
            tn: 3,
            fp: 1,
            fn_: 2,
        });
        assert!((m.balanced_accuracy - 0.625).abs() < 1e-15);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert!(!m.degenerate.any());

        // constant CORRECT predictor
        let m = classification_metrics(&ConfusionCounts {
            tp: 765,
            tn: 0,
            fp: 235,
            fn_: 0,
        });
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.balanced_accuracy, 0.5);

        // constant WRONG predictor
        let m = classification_metrics(&ConfusionCounts {
            tp: 0,
            tn: 626,
            fp: 0,
            fn_: 374,
        });
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.degenerate.precision && m.degenerate.recall && m.degenerate.f1);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&labels(&[1, 0, 1, 0]), &[0.7; 4]).unwrap(), 0.5);
        assert_eq!(auc(&labels(&[0, 0, 1, 1]), &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&labels(&[1, 0, 1]), &[0.2, 0.4, 0.6]).unwrap(), 0.5);
        assert_eq!(auc(&labels(&[1, 1]), &[0.2, 0.4]), Err(MetricError::SingleClass));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&labels(&[1, 0]), &[1.0, 0.0]).unwrap(), 0.0);
        let r = rmse(&labels(&[1, 0]), &[0.8, 0.3]).unwrap();
        assert!((r - 0.065f64.sqrt()).abs() < 1e-15);
        assert!((r - 0.2550).abs() < 1e-4);
        assert_eq!(rmse(&labels(&[1, 0, 0]), &[0.5; 3]).unwrap(), 0.5);
    }

    #[test]
    fn report_needs_points() {
        assert_eq!(metric_report(&[], &[], 4), Err(MetricError::Empty));
        let p: Vec<Prediction> = [0.9, 0.2].iter().map(|&x| Prediction::from_probability(x)).collect();
        let r = metric_report(&labels(&[1, 0]), &p, 0).unwrap();
        assert_eq!(r.failure_count, 0);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    proptest! {
        #[test]
        fn constant_predictor_balanced_accuracy(n_pos in 1u64..200, n_neg in 1u64..200, correct in any::<bool>()) {
            let c = if correct {
                ConfusionCounts { tp: n_pos, fp: n_neg, tn: 0, fn_: 0 }
            } else {
                ConfusionCounts { tp: 0, fp: 0, tn: n_neg, fn_: n_pos }
            };
            prop_assert_eq!(classification_metrics(&c).balanced_accuracy, 0.5);
        }

        #[test]
        fn accuracy_identity(tp in 0u64..100, tn in 0u64..100, fp in 0u64..100, fn_ in 0u64..100) {
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            prop_assume!(tp + fn_ > 0 && tn + fp > 0);
            let m = classification_metrics(&c);
            let p = (tp + fn_) as f64;
            let n = (tn + fp) as f64;
            let specificity = tn as f64 / n;
            prop_assert!((m.accuracy - (m.recall * p + specificity * n) / (p + n)).abs() < 1e-12);
        }
    }
}
