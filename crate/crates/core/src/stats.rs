//! Small statistics shared by the metric and meta-evaluation code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Harmonic mean; zero whenever any component is zero (or negative).
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Set when one side had zero variance and `rho` was forced to 0.
    pub degenerate: bool,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::input("spearman inputs differ in length"));
    }
    if x.len() < 3 {
        return Err(Error::input(format!(
            "spearman needs at least 3 points, got {}",
            x.len()
        )));
    }
    match pearson(&average_ranks(x), &average_ranks(y)) {
        Some(rho) => Ok(Spearman {
            rho,
            degenerate: false,
        }),
        None => {
            log::warn!("spearman: zero-variance input, reporting rho = 0");
            Ok(Spearman {
                rho: 0.0,
                degenerate: true,
            })
        }
    }
}

/// Area under the ROC curve treating `positives` as the positive class:
/// P(score_pos > score_neg) + 0.5 P(tie), via the rank-sum identity.
pub fn auc_roc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::input("AUC needs at least one example per class"));
    }
    if positives.iter().chain(negatives).any(|v| v.is_nan()) {
        return Err(Error::input("AUC scores contain NaN"));
    }
    let all: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    let ranks = average_ranks(&all);
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let rank_sum: f64 = ranks[..positives.len()].iter().sum();
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hm_examples() {
        assert!((harmonic_mean(&[0.5, 1.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(harmonic_mean(&[0.0, 1.0]), 0.0);
        assert_eq!(harmonic_mean(&[0.4, 0.4, 0.4]), 0.4);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_cases() {
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.5, 0.9]).unwrap();
        assert!((s.rho - 1.0).abs() < 1e-15 && !s.degenerate);
        let c = spearman(&[1.0, 2.0, 3.0], &[0.4, 0.4, 0.4]).unwrap();
        assert_eq!(c.rho, 0.0);
        assert!(c.degenerate);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_roc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert_eq!(auc_roc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
    }
}
