//! Binary classification metrics over per-patient class-1 probabilities.

use crate::error::{Error, Result};

/// The six reported metrics. `auc`/`ap` are `None` when only one class is
/// present in the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = [
        "accuracy",
        "macro_f1",
        "macro_precision",
        "macro_recall",
        "auc",
        "average_precision",
    ];

    pub fn values(&self) -> [Option<f64>; 6] {
        [
            Some(self.accuracy),
            Some(self.macro_f1),
            Some(self.macro_precision),
            Some(self.macro_recall),
            self.auc,
            self.ap,
        ]
    }
}

/// Accuracy at the 0.5 threshold, macro-averaged F1/precision/recall, AUC by
/// the rank statistic (ties get half credit), and average precision over the
/// score-sorted threshold sweep.
pub fn eval_metrics(scores: &[f64], labels: &[usize]) -> Result<Metrics> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "metrics need matching non-empty scores/labels, got {}/{}",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 1) {
        return Err(Error::Config(format!(
            "binary metrics expect labels 0/1, got {bad}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("non-finite score".into()));
    }

    let n = scores.len();
    let preds: Vec<usize> = scores.iter().map(|s| usize::from(*s >= 0.5)).collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / n as f64;

    // Macro averaging over both classes; empty denominators count as zero.
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    for class in 0..2usize {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l == class)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l != class)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p != class && **l == class)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        precision_sum += precision;
        recall_sum += recall;
        f1_sum += f1;
    }

    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = n - n_pos;
    let (auc, ap) = if n_pos == 0 || n_neg == 0 {
        (None, None)
    } else {
        (
            Some(rank_auc(scores, labels, n_pos, n_neg)),
            Some(average_precision(scores, labels, n_pos)),
        )
    };

    Ok(Metrics {
        accuracy,
        macro_f1: f1_sum / 2.0,
        macro_precision: precision_sum / 2.0,
        macro_recall: recall_sum / 2.0,
        auc,
        ap,
    })
}

/// Mann-Whitney AUC via midranks: ties between a positive and a negative
/// contribute half a pair.
fn rank_auc(scores: &[f64], labels: &[usize], n_pos: usize, n_neg: usize) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for item in order.iter().take(j + 1).skip(i) {
            rank[*item] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = (0..n).filter(|&i| labels[i] == 1).map(|i| rank[i]).sum();
    (pos_rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Sum of `(R_k - R_{k-1}) * P_k` over the descending-score threshold sweep;
/// tied scores enter as one threshold group.
fn average_precision(scores: &[f64], labels: &[usize], n_pos: usize) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for item in order.iter().take(j + 1).skip(i) {
            if labels[*item] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let precision = tp / (tp + fp);
        let recall = tp / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    ap
}

/// Brute-force pairwise AUC: `P(score_pos > score_neg) + 0.5 P(tie)` over
/// all positive/negative pairs. Test oracle for [`eval_metrics`].
pub fn pairwise_auc_oracle(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == 1)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == 0)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut credit = 0.0;
    for p in &pos {
        for q in &neg {
            if p > q {
                credit += 1.0;
            } else if p == q {
                credit += 0.5;
            }
        }
    }
    Some(credit / (pos.len() * neg.len()) as f64)
}
