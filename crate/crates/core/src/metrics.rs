//! Evaluation metrics.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView1};

use crate::error::{FlError, Result};

pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Cluster purity under max-overlap relabeling: every learned cluster is
/// credited with its most common planted cluster.
pub fn cluster_purity(learned: &BTreeMap<usize, usize>, truth: &BTreeMap<usize, usize>) -> f64 {
    let mut overlap: BTreeMap<usize, HashMap<usize, usize>> = BTreeMap::new();
    let mut total = 0usize;
    for (client, &k) in learned {
        if let Some(&t) = truth.get(client) {
            *overlap.entry(k).or_default().entry(t).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let matched: usize = overlap.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    matched as f64 / total as f64
}

/// Area under the ROC curve via the rank-sum statistic; tied scores count
/// one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(FlError::shape("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FlError::domain("ROC-AUC needs both positive and negative examples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn accuracy_counts_argmax_hits() {
        let p = array![[0.9, 0.1], [0.3, 0.7], [0.6, 0.4]];
        assert!((accuracy(&p, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn purity_is_label_permutation_invariant() {
        let truth: BTreeMap<usize, usize> = (0..6).map(|i| (i, i % 2)).collect();
        let flipped: BTreeMap<usize, usize> = (0..6).map(|i| (i, 1 - i % 2)).collect();
        assert_eq!(cluster_purity(&flipped, &truth), 1.0);
        let merged: BTreeMap<usize, usize> = (0..6).map(|i| (i, 0)).collect();
        assert_eq!(cluster_purity(&merged, &truth), 0.5);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4];
        let pos = [false, true, false, true, false];
        // brute force over positive/negative pairs
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        assert!((roc_auc(&scores, &pos).unwrap() - wins / pairs).abs() < 1e-15);
        assert!(roc_auc(&scores, &[true; 5]).is_err());
    }
}
