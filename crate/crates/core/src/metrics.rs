//! Accuracy and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::shape(format!(
            "accuracy: {} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the first maximum of each row of `scores[N, K]`.
pub fn argmax_rows(scores: &[f64], k: usize) -> Vec<usize> {
    scores
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of `logits[N, K]`.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. Computed from integer pair counts.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!(
            "auc: {} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc: NaN score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "auc is undefined when the labels contain a single class",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        // -0.0 and 0.0 compare equal
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += p * neg_below;
        ties += p * n;
        neg_below += n;
        i = j;
    }
    Ok((2 * wins + ties) as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// Binary: AUC of the positive class. Multiclass: macro mean over the
    /// classes that have a defined one-vs-rest AUC.
    pub overall: f64,
    /// One-vs-rest AUC per class; `None` when the class is absent from (or
    /// is the only class in) the labels.
    pub per_class: Vec<Option<f64>>,
}

/// AUC from class probabilities `probs[N, K]`.
pub fn auc(probs: &[f64], k: usize, labels: &[usize]) -> Result<AucReport> {
    if k < 2 || probs.len() != labels.len() * k {
        return Err(Error::shape(format!(
            "auc: {} scores do not form {} rows of {k} classes",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {l} out of range for {k} classes")));
    }
    let column = |c: usize| -> Vec<f64> { probs.chunks_exact(k).map(|r| r[c]).collect() };
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        per_class.push(match auc_binary(&column(c), &pos) {
            Ok(a) => Some(a),
            Err(_) if k > 2 => None,
            Err(e) => return Err(e),
        });
    }
    let overall = if k == 2 {
        per_class[1].unwrap()
    } else {
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::invalid("auc is undefined: no class has both positives and negatives"));
        }
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(AucReport { overall, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &pos).unwrap(), 0.75);
        assert_eq!(auc_binary(&[0.1, 0.2, 0.3, 0.4], &pos).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.5; 4], &pos).unwrap(), 0.5);
        assert!(auc_binary(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn multiclass_excludes_absent_class() {
        // class 2 never occurs
        let probs = [0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.6, 0.3, 0.1, 0.1, 0.8, 0.1];
        let r = auc(&probs, 3, &[0, 1, 0, 1]).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.overall, 1.0);
        assert!(auc(&[0.4, 0.6, 0.3, 0.7], 2, &[1, 1]).is_err());
    }
}
