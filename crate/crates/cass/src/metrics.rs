//! Evaluation metrics: macro F1, balanced accuracy, and t-based intervals.
//!
//! Per-class scores come straight from confusion-matrix counts. A class that
//! appears in neither targets nor predictions has no defined score; such
//! classes are excluded from the macro mean and reported as `None` so
//! callers can see the gap instead of silently averaging over it.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CassError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    /// Unweighted mean over the `Some` entries of `per_class`.
    pub value: f64,
    /// One entry per class; `None` marks a class excluded from the mean.
    pub per_class: Vec<Option<f64>>,
    pub n_samples: usize,
}

fn mean_of_present(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

fn check_class_range(values: &[usize], num_classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = values.iter().find(|&&v| v >= num_classes) {
        return Err(CassError::InvalidInput(format!(
            "{what} contains class {bad}, but only {num_classes} classes exist"
        )));
    }
    Ok(())
}

/// Macro F1 over class indices: per class `2TP / (2TP + FP + FN)`, then an
/// unweighted mean.
pub fn f1_macro(predictions: &[usize], targets: &[usize], num_classes: usize) -> Result<MetricReport> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(CassError::InvalidInput(format!(
            "predictions ({}) and targets ({}) must be equal-length and non-empty",
            predictions.len(),
            targets.len()
        )));
    }
    check_class_range(predictions, num_classes, "predictions")?;
    check_class_range(targets, num_classes, "targets")?;

    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                None
            } else {
                Some(2.0 * tp[c] as f64 / denom as f64)
            }
        })
        .collect();
    Ok(MetricReport {
        metric_name: "f1_macro".into(),
        value: mean_of_present(&per_class),
        per_class,
        n_samples: predictions.len(),
    })
}

/// Macro F1 over multi-hot labels: each class scored as an independent
/// binary problem across samples.
pub fn f1_macro_multilabel(predictions: &[Vec<u8>], targets: &[Vec<u8>]) -> Result<MetricReport> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(CassError::InvalidInput(
            "predictions and targets must be equal-length and non-empty".into(),
        ));
    }
    let num_classes = targets[0].len();
    if num_classes == 0
        || predictions.iter().any(|p| p.len() != num_classes)
        || targets.iter().any(|t| t.len() != num_classes)
    {
        return Err(CassError::InvalidInput(
            "all multi-hot rows must share one non-zero class count".into(),
        ));
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fneg = 0usize;
            for (p, t) in predictions.iter().zip(targets) {
                match (p[c] != 0, t[c] != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                None
            } else {
                Some(2.0 * tp as f64 / denom as f64)
            }
        })
        .collect();
    Ok(MetricReport {
        metric_name: "f1_macro".into(),
        value: mean_of_present(&per_class),
        per_class,
        n_samples: predictions.len(),
    })
}

/// Balanced accuracy: the unweighted mean of per-class recall. Classes with
/// no positive targets are excluded from the mean and reported as `None`.
pub fn balanced_accuracy(
    predictions: &[usize],
    targets: &[usize],
    num_classes: usize,
) -> Result<MetricReport> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(CassError::InvalidInput(format!(
            "predictions ({}) and targets ({}) must be equal-length and non-empty",
            predictions.len(),
            targets.len()
        )));
    }
    check_class_range(predictions, num_classes, "predictions")?;
    check_class_range(targets, num_classes, "targets")?;

    let mut tp = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        support[t] += 1;
        if p == t {
            tp[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            if support[c] == 0 {
                None
            } else {
                Some(tp[c] as f64 / support[c] as f64)
            }
        })
        .collect();
    Ok(MetricReport {
        metric_name: "balanced_accuracy".into(),
        value: mean_of_present(&per_class),
        per_class,
        n_samples: predictions.len(),
    })
}

/// Mean and 95% confidence halfwidth of `values` using a Student-t interval
/// with `n - 1` degrees of freedom and the sample standard deviation.
///
/// Needs at least two values; identical values give halfwidth 0.
pub fn ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(CassError::InvalidInput(format!(
            "ci95 needs at least 2 values, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CassError::InvalidInput("ci95 values must be finite".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .map_err(|e| CassError::InvalidInput(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    Ok((mean, t * sd / (n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_score_one() {
        let t = vec![0, 1, 2, 0, 1, 2];
        let f1 = f1_macro(&t, &t, 3).unwrap();
        let ba = balanced_accuracy(&t, &t, 3).unwrap();
        assert!((f1.value - 1.0).abs() < 1e-15);
        assert!((ba.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_wrong_binary_predictions_score_zero() {
        let targets = vec![0, 0, 1, 1];
        let preds = vec![1, 1, 0, 0];
        let f1 = f1_macro(&preds, &targets, 2).unwrap();
        assert_eq!(f1.value, 0.0);
        let ba = balanced_accuracy(&preds, &targets, 2).unwrap();
        assert_eq!(ba.value, 0.0);
    }

    #[test]
    fn f1_hand_example() {
        // Class 0: TP=2 FP=1 FN=0 -> 4/5. Class 1: TP=1 FP=0 FN=1 -> 2/3.
        let targets = vec![0, 0, 1, 1];
        let preds = vec![0, 0, 0, 1];
        let f1 = f1_macro(&preds, &targets, 2).unwrap();
        let expect = (4.0 / 5.0 + 2.0 / 3.0) / 2.0;
        assert!((f1.value - expect).abs() < 1e-15);
        assert_eq!(f1.per_class.len(), 2);
        assert!((f1.per_class[0].unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_flagged_and_excluded() {
        // Class 2 never appears anywhere.
        let targets = vec![0, 0, 1, 1];
        let preds = vec![0, 1, 1, 1];
        let ba = balanced_accuracy(&preds, &targets, 3).unwrap();
        assert_eq!(ba.per_class[2], None);
        // Recalls: class 0 -> 1/2, class 1 -> 2/2.
        assert!((ba.value - 0.75).abs() < 1e-15);
        let f1 = f1_macro(&preds, &targets, 3).unwrap();
        assert_eq!(f1.per_class[2], None);
    }

    #[test]
    fn balanced_accuracy_equals_accuracy_when_classes_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut targets: Vec<usize> = (0..40).map(|i| i % 2).collect();
            targets.shuffle(&mut rng);
            let preds: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
            let acc = preds
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count() as f64
                / 40.0;
            let ba = balanced_accuracy(&preds, &targets, 2).unwrap().value;
            assert!((ba - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_match_naive_confusion_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let classes = rng.gen_range(2..6usize);
            let n = rng.gen_range(1..50usize);
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();

            // Independent per-class loops, no shared counting code.
            let mut f1s = Vec::new();
            let mut recs = Vec::new();
            for c in 0..classes {
                let tp = preds
                    .iter()
                    .zip(&targets)
                    .filter(|(&p, &t)| p == c && t == c)
                    .count() as f64;
                let fp = preds
                    .iter()
                    .zip(&targets)
                    .filter(|(&p, &t)| p == c && t != c)
                    .count() as f64;
                let fneg = preds
                    .iter()
                    .zip(&targets)
                    .filter(|(&p, &t)| p != c && t == c)
                    .count() as f64;
                if 2.0 * tp + fp + fneg > 0.0 {
                    f1s.push(2.0 * tp / (2.0 * tp + fp + fneg));
                }
                if tp + fneg > 0.0 {
                    recs.push(tp / (tp + fneg));
                }
            }
            let f1_naive = f1s.iter().sum::<f64>() / f1s.len() as f64;
            let ba_naive = recs.iter().sum::<f64>() / recs.len() as f64;
            assert_eq!(f1_macro(&preds, &targets, classes).unwrap().value, f1_naive);
            assert_eq!(
                balanced_accuracy(&preds, &targets, classes).unwrap().value,
                ba_naive
            );
        }
    }

    #[test]
    fn multilabel_f1_hand_example() {
        let targets = vec![vec![1, 0], vec![1, 1], vec![0, 1]];
        let preds = vec![vec![1, 0], vec![0, 1], vec![0, 1]];
        // Class 0: TP=1 FP=0 FN=1 -> 2/3. Class 1: TP=2 FP=0 FN=0 -> 1.
        let f1 = f1_macro_multilabel(&preds, &targets).unwrap();
        let expect = (2.0 / 3.0 + 1.0) / 2.0;
        assert!((f1.value - expect).abs() < 1e-15);
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let classes = rng.gen_range(2..5usize);
            let n = rng.gen_range(1..30usize);
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let f1 = f1_macro(&preds, &targets, classes).unwrap().value;
            let ba = balanced_accuracy(&preds, &targets, classes).unwrap().value;
            assert!((0.0..=1.0).contains(&f1));
            assert!((0.0..=1.0).contains(&ba));
        }
    }

    #[test]
    fn ci95_two_point_oracle() {
        // mean 0.5, sample sd sqrt(0.5), t(0.975, dof 1) = 12.7062047361747:
        // halfwidth = 12.7062047361747 * sqrt(0.5) / sqrt(2).
        let (mean, half) = ci95(&[0.0, 1.0]).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);
        assert!((half - 6.35310236808735).abs() < 1e-9);
    }

    #[test]
    fn ci95_identical_values_have_zero_width() {
        let (mean, half) = ci95(&[0.7, 0.7, 0.7]).unwrap();
        assert_eq!(mean, 0.7);
        assert_eq!(half, 0.0);
    }

    #[test]
    fn ci95_needs_two_values() {
        assert!(ci95(&[0.5]).is_err());
        assert!(ci95(&[]).is_err());
    }

    #[test]
    fn ci95_five_point_oracle() {
        // n=5, mean 3, sample sd sqrt(2.5), t(0.975, dof 4) = 2.7764451051977987.
        let (mean, half) = ci95(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((mean - 3.0).abs() < 1e-12);
        let expect = 2.7764451051977987 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((half - expect).abs() < 1e-9);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(f1_macro(&[0, 1], &[0], 2).is_err());
        assert!(balanced_accuracy(&[0], &[0, 1], 2).is_err());
        assert!(f1_macro(&[], &[], 2).is_err());
        assert!(f1_macro(&[5], &[0], 2).is_err());
    }
}
