//! ROC-AUC and recall.

use crate::error::{Error, Result};

/// Area under the ROC curve: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` over all
/// positive/negative pairs, computed from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// `TP / (TP + FN)`; `None` when there are no positives.
pub fn recall(predicted: &[bool], labels: &[bool]) -> Option<f64> {
    let mut tp = 0usize;
    let mut pos = 0usize;
    for (p, l) in predicted.iter().zip(labels) {
        if *l {
            pos += 1;
            if *p {
                tp += 1;
            }
        }
    }
    (pos > 0).then(|| tp as f64 / pos as f64)
}
