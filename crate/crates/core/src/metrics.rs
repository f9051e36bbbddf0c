//! Classification metrics at the 0.5 threshold plus the rank-statistic AUC.

use serde::{Deserialize, Serialize};

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Evaluation outcome of one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagOutcome {
    pub bag_id: String,
    pub label: u8,
    /// Class-token probability; the score all reported metrics use.
    pub score: f64,
    /// Prediction-gated fused decision.
    pub fused_score: f64,
    /// Label-gated fused decision, kept as a diagnostic only.
    pub fused_diagnostic: f64,
    pub num_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub threshold: f64,
    pub num_bags: usize,
    pub num_positive: usize,
}

/// AUC as the Mann-Whitney rank statistic with average ranks, so tied
/// positive/negative scores earn half credit. Returns 0.5 when one class is
/// absent.
pub fn auc_rank(labels: &[u8], scores: &[f64]) -> f64 {
    assert_eq!(labels.len(), scores.len());
    let positives = labels.iter().filter(|l| **l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average rank of the tie block [i, j], 1-based.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)
}

/// Confusion-matrix metrics at the fixed threshold, plus AUC.
pub fn compute_metrics(labels: &[u8], scores: &[f64]) -> MetricsReport {
    assert_eq!(labels.len(), scores.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fnc = 0usize;
    for (l, s) in labels.iter().zip(scores) {
        let predicted = *s >= DECISION_THRESHOLD;
        match (predicted, *l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnc += 1,
        }
    }
    let total = labels.len();
    let accuracy = if total == 0 { 0.0 } else { (tp + tn) as f64 / total as f64 };
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fnc == 0 { 0.0 } else { tp as f64 / (tp + fnc) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        auc: auc_rank(labels, scores),
        threshold: DECISION_THRESHOLD,
        num_bags: total,
        num_positive: labels.iter().filter(|l| **l == 1).count(),
    }
}
