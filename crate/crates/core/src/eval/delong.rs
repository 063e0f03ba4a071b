//! ROC AUC with DeLong variance and confidence interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    pub variance: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Number of `sorted` values below `s` plus half the ties.
fn placement(sorted: &[f64], s: f64) -> f64 {
    let below = sorted.partition_point(|&v| v < s);
    let upto = sorted.partition_point(|&v| v <= s);
    below as f64 + 0.5 * (upto - below) as f64
}

fn sample_variance(v: &[f64], mean: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// AUC as the Mann–Whitney statistic with half credit for ties; variance
/// from the DeLong structural components. `labels[i]` marks a positive.
pub fn delong_auc(scores: &[f64], labels: &[bool]) -> Result<AucResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("score is NaN".into()));
    }
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Parameter("AUC needs both positive and negative labels".into()));
    }
    let mut pos_sorted = pos.clone();
    let mut neg_sorted = neg.clone();
    pos_sorted.sort_by(f64::total_cmp);
    neg_sorted.sort_by(f64::total_cmp);
    let (n1, n0) = (pos.len() as f64, neg.len() as f64);
    // V10: share of negatives each positive beats; V01: share of positives
    // ranked above each negative
    let counts10: Vec<f64> = pos.iter().map(|&s| placement(&neg_sorted, s)).collect();
    let v10: Vec<f64> = counts10.iter().map(|c| c / n0).collect();
    let v01: Vec<f64> = neg.iter().map(|&s| (n1 - placement(&pos_sorted, s)) / n1).collect();
    let auc = counts10.iter().sum::<f64>() / (n1 * n0);
    let variance = sample_variance(&v10, auc) / n1 + sample_variance(&v01, auc) / n0;
    let half = Z95 * variance.sqrt();
    Ok(AucResult {
        auc,
        variance,
        ci_lower: (auc - half).clamp(0.0, 1.0),
        ci_upper: (auc + half).clamp(0.0, 1.0),
        n_positive: pos.len(),
        n_negative: neg.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let r = delong_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.variance, 0.0);
    }

    #[test]
    fn three_of_four_pairs() {
        let r = delong_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert!(r.ci_lower <= r.auc && r.auc <= r.ci_upper);
    }

    #[test]
    fn ties_get_half_credit() {
        let r = delong_auc(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(delong_auc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
