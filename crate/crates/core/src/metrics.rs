//! Accuracy, macro-averaged F1, and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    /// True-label count per class.
    pub support: Vec<usize>,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Validation("metrics need at least one sample".into()));
    }
    Ok(())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(predicted.len(), truth.len())?;
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1. A class that is neither predicted nor present
/// contributes 0.
pub fn macro_f1(predicted: &[usize], truth: &[usize], class_count: usize) -> Result<f64> {
    check_lengths(predicted.len(), truth.len())?;
    if class_count == 0 {
        return Err(Error::Validation("class_count must be >= 1".into()));
    }
    if let Some(bad) = predicted.iter().chain(truth).find(|&&c| c >= class_count) {
        return Err(Error::Validation(format!("class {bad} out of range for {class_count} classes")));
    }
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fn_ = vec![0usize; class_count];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..class_count)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / class_count as f64)
}

/// Probability that a random positive outranks a random negative, ties counted as
/// one half. `labels` must be 0/1 with both classes present.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("AUC labels must be 0 or 1, got {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("AUC scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tied groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

pub fn support(truth: &[usize], class_count: usize) -> Vec<usize> {
    let mut s = vec![0; class_count];
    for &t in truth {
        if t < class_count {
            s[t] += 1;
        }
    }
    s
}

/// Accuracy and macro-F1, plus AUC for binary problems (taking column 1 of
/// `probabilities` as the positive score) when both classes are present.
pub fn evaluate(probabilities: &crate::Matrix, truth: &[usize]) -> Result<Vec<EvalResult>> {
    let classes = probabilities.cols();
    let predicted = probabilities.argmax_rows();
    let sup = support(truth, classes);
    let mut out = vec![
        EvalResult {
            metric: "accuracy".into(),
            value: accuracy(&predicted, truth)?,
            support: sup.clone(),
        },
        EvalResult {
            metric: "macro_f1".into(),
            value: macro_f1(&predicted, truth, classes)?,
            support: sup.clone(),
        },
    ];
    if classes == 2 {
        let scores: Vec<f64> = (0..probabilities.rows()).map(|r| probabilities.get(r, 1)).collect();
        match auc(&scores, truth) {
            Ok(v) => out.push(EvalResult {
                metric: "auc".into(),
                value: v,
                support: sup,
            }),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
