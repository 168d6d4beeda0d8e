//! Confusion-matrix metrics, ROC AUC and average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_sim::RhythmClass;

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::param("ROC needs both positive and negative labels"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::param("scores contain NaN"));
    }
    Ok((pos, neg))
}

/// (false positive, true positive) counts after each distinct threshold,
/// scanning scores from high to low. Tied scores move together.
fn cumulative_counts(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0, 0)];
    let (mut fp, mut tp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = k + 1 == order.len() || scores[order[k + 1]] != scores[i];
        if last_of_tie {
            points.push((fp, tp));
        }
    }
    points
}

/// Exact trapezoidal area under the ROC curve over all distinct thresholds.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let points = cumulative_counts(scores, labels);
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * (w[1].1 + w[0].1) as f64 / 2.0)
        .sum();
    Ok(area / (pos as f64 * neg as f64))
}

/// Trapezoidal ROC area sampled at `n_thresholds` evenly spaced cut points on
/// [0, 1], the way fixed-grid streaming AUC implementations approximate it.
pub fn roc_auc_fixed_thresholds(scores: &[f64], labels: &[bool], n_thresholds: usize) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    if n_thresholds < 2 {
        return Err(Error::param("need at least two thresholds"));
    }
    let eps = 1e-7;
    let mut curve: Vec<(f64, f64)> = (0..n_thresholds)
        .map(|k| {
            let t = match k {
                0 => -eps,
                k if k == n_thresholds - 1 => 1.0 + eps,
                k => k as f64 / (n_thresholds - 1) as f64,
            };
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s > t).count();
            let fp = scores.iter().zip(labels).filter(|(&s, &l)| !l && s > t).count();
            (fp as f64 / neg as f64, tp as f64 / pos as f64)
        })
        .collect();
    curve.reverse();
    Ok(curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

/// Average precision: Σ (R_k − R_{k−1}) · P_k over distinct thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let points = cumulative_counts(scores, labels);
    Ok(points
        .windows(2)
        .map(|w| {
            let (fp, tp) = w[1];
            let recall_gain = (tp - w[0].1) as f64 / pos as f64;
            if recall_gain == 0.0 {
                0.0
            } else {
                recall_gain * tp as f64 / (tp + fp) as f64
            }
        })
        .sum())
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Names of quantities whose denominator was zero; those are reported as 0.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: String, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Binary matrices report class 1 as the positive class; larger ones are
/// macro-averaged one-vs-rest. F1 is the harmonic mean of the reported
/// precision and recall.
pub fn metrics_from_confusion(confusion: &[Vec<u64>]) -> Result<ConfusionMetrics> {
    let n = confusion.len();
    if n < 2 || confusion.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("confusion matrix must be square with at least 2 classes".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::param("confusion matrix is empty"));
    }
    let trace: u64 = (0..n).map(|i| confusion[i][i]).sum();
    let mut undefined = Vec::new();
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|k| {
            let tp = confusion[k][k];
            let actual: u64 = confusion[k].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
            let fp = predicted - tp;
            let tn = total - actual - fp;
            let precision = ratio(tp, predicted, format!("precision[{k}]"), &mut undefined);
            let recall = ratio(tp, actual, format!("recall[{k}]"), &mut undefined);
            let specificity = ratio(tn, tn + fp, format!("specificity[{k}]"), &mut undefined);
            ClassMetrics { precision, recall, specificity, f1: harmonic(precision, recall) }
        })
        .collect();
    let (precision, recall, specificity) = if n == 2 {
        let c = &per_class[1];
        (c.precision, c.recall, c.specificity)
    } else {
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
        (mean(|c| c.precision), mean(|c| c.recall), mean(|c| c.specificity))
    };
    Ok(ConfusionMetrics {
        accuracy: trace as f64 / total as f64,
        precision,
        recall,
        specificity,
        f1: harmonic(precision, recall),
        per_class,
        undefined,
    })
}

/// Evaluation summary with the column names of the published result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "Avg Time (s)")]
    pub avg_time_s: f64,
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "Specificity")]
    pub specificity: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F1 Score")]
    pub f1: f64,
    #[serde(rename = "PRC")]
    pub prc: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    /// Same ROC sampled on a fixed 200-point threshold grid.
    pub auc_200_thresholds: f64,
    pub classes: Vec<RhythmClass>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub undefined: Vec<String>,
    pub n_samples: usize,
}

/// Full report from class probabilities and true class indices.
pub fn report_from_probabilities(
    probabilities: &[Vec<f64>],
    truth: &[usize],
    classes: &[RhythmClass],
    avg_time_s: f64,
) -> Result<MetricsReport> {
    let n = classes.len();
    if probabilities.len() != truth.len() || probabilities.is_empty() {
        return Err(Error::Shape("need one probability row per label".into()));
    }
    let predicted: Vec<usize> = probabilities
        .iter()
        .map(|row| {
            (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect();
    let confusion = confusion_matrix(truth, &predicted, n);
    let cm = metrics_from_confusion(&confusion)?;
    let mut undefined = cm.undefined.clone();

    // positive-class curves for binary, macro one-vs-rest otherwise
    let curve_classes: Vec<usize> = if n == 2 { vec![1] } else { (0..n).collect() };
    let (mut auc, mut auc200, mut prc, mut used) = (0.0, 0.0, 0.0, 0);
    for &k in &curve_classes {
        let scores: Vec<f64> = probabilities.iter().map(|r| r[k]).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        match roc_auc(&scores, &labels) {
            Ok(a) => {
                auc += a;
                auc200 += roc_auc_fixed_thresholds(&scores, &labels, 200)?;
                prc += average_precision(&scores, &labels)?;
                used += 1;
            }
            Err(Error::Parameter(_)) => undefined.push(format!("auc[{k}]")),
            Err(e) => return Err(e),
        }
    }
    let denom = used.max(1) as f64;
    Ok(MetricsReport {
        avg_time_s,
        accuracy: cm.accuracy,
        specificity: cm.specificity,
        precision: cm.precision,
        recall: cm.recall,
        f1: cm.f1,
        prc: prc / denom,
        auc: auc / denom,
        auc_200_thresholds: auc200 / denom,
        classes: classes.to_vec(),
        confusion,
        per_class: cm.per_class,
        undefined,
        n_samples: truth.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_binary_confusion() {
        let m = metrics_from_confusion(&[vec![50, 0], vec![0, 50]]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (1.0, 1.0, 1.0));
        assert!(m.undefined.is_empty());
    }

    #[test]
    fn hand_summed_binary_confusion() {
        let m = metrics_from_confusion(&[vec![45, 5], vec![10, 40]]).unwrap();
        assert!((m.accuracy - 0.85).abs() < 1e-12);
        assert!((m.precision - 40.0 / 45.0).abs() < 1e-12);
        assert!((m.recall - 0.80).abs() < 1e-12);
        assert!((m.specificity - 0.90).abs() < 1e-12);
        let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        assert!((m.f1 - hm).abs() < 1e-9);
    }

    #[test]
    fn single_predicted_class_flags_undefined() {
        // every sample predicted as class 2
        let c = vec![vec![0, 0, 10, 0], vec![0, 0, 10, 0], vec![0, 0, 10, 0], vec![0, 0, 10, 0]];
        let m = metrics_from_confusion(&c).unwrap();
        assert_eq!(m.per_class[2].recall, 1.0);
        for k in [0, 1, 3] {
            assert_eq!(m.per_class[k].recall, 0.0);
            assert_eq!(m.per_class[k].precision, 0.0);
            assert!(m.undefined.contains(&format!("precision[{k}]")));
        }
        assert!((m.accuracy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn auc_reference_values() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.7, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn fixed_grid_close_to_exact_for_spread_scores() {
        let scores: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let labels: Vec<bool> = (0..100).map(|i| (i * 7) % 10 > 3).collect();
        let exact = roc_auc(&scores, &labels).unwrap();
        let approx = roc_auc_fixed_thresholds(&scores, &labels, 200).unwrap();
        assert!((exact - approx).abs() < 0.02);
    }

    #[test]
    fn average_precision_hand_example() {
        // ranking: 0.8(+) 0.4(-) 0.35(+) 0.1(-) → AP = 0.5·1 + 0.5·(2/3)
        let ap = average_precision(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }
}
