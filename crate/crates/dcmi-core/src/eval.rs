//! Rank-statistic ROC AUC and macro/micro evaluation over domains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("AUC needs at least one positive and one negative label")]
    SingleClass,
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
}

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counting one half. Computed from tie-averaged ranks
/// (Mann-Whitney U), O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average 1-based ranks over tied runs.
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &ix in &order[i..=j] {
            ranks[ix] = rank;
        }
        i = j + 1;
    }

    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-domain, macro, and micro AUC for one evaluation pass. Domains whose
/// test cell has a single class are undefined; they are skipped in the
/// macro average and listed in `skipped_domains`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub per_domain: Vec<Option<f64>>,
    pub skipped_domains: Vec<usize>,
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
}

/// Aggregate positive-class scores against binary labels, grouped by
/// domain for the macro average and pooled for the micro average.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[usize],
    domains: &[usize],
    num_domains: usize,
) -> EvalReport {
    debug_assert_eq!(scores.len(), labels.len());
    debug_assert_eq!(scores.len(), domains.len());
    let bool_labels: Vec<bool> = labels.iter().map(|&y| y == 1).collect();

    let mut per_domain = Vec::with_capacity(num_domains);
    let mut skipped = Vec::new();
    let mut defined = Vec::new();
    for d in 0..num_domains {
        let idx: Vec<usize> = (0..scores.len()).filter(|&i| domains[i] == d).collect();
        let ds: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let dl: Vec<bool> = idx.iter().map(|&i| bool_labels[i]).collect();
        match auc(&ds, &dl) {
            Ok(a) => {
                per_domain.push(Some(a));
                defined.push(a);
            }
            Err(_) => {
                per_domain.push(None);
                skipped.push(d);
            }
        }
    }
    let macro_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let micro_auc = auc(scores, &bool_labels).ok();
    EvalReport {
        per_domain,
        skipped_domains: skipped,
        macro_auc,
        micro_auc,
    }
}
