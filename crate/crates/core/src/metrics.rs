//! Logloss and AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound applied to predictions before taking logarithms.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub logloss: f64,
    pub auc: f64,
    pub n_samples: usize,
}

impl EvalResult {
    pub fn compute(predictions: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(EvalResult {
            logloss: logloss(predictions, labels)?,
            auc: auc(predictions, labels)?,
            n_samples: labels.len(),
        })
    }
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: {a} scores for {b} labels")));
    }
    if a == 0 {
        return Err(Error::invalid(format!("{what} of an empty set")));
    }
    Ok(())
}

/// `−(1/N) Σ (y ln ŷ + (1 − y) ln(1 − ŷ))` with `ŷ` clipped to
/// `[1e-12, 1 − 1e-12]`.
pub fn logloss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len(), "logloss")?;
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mann-Whitney AUC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, by sorting with tied
/// scores sharing their average rank.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "auc")?;
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("auc score {s}")));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both positive and negative labels"));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y > 0.5)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based ranks; tied values receive the mean of their rank span.
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
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a.len(), b.len(), "spearman")?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    pearson(&ra, &rb)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a.len(), b.len(), "pearson")?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid("correlation of a constant sequence"));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1.0 && yj == 0.0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn logloss_examples() {
        assert!((logloss(&[0.5, 0.5], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logloss(&[1.0 - 1e-12], &[1.0]).unwrap() < 1e-11);
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((logloss(&[0.9, 0.2], &[1.0, 0.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.164252).abs() < 1e-6);
        assert!(logloss(&[0.0], &[1.0]).unwrap().is_finite());
        assert!(logloss(&[0.5], &[1.0, 0.0]).is_err());
        assert!(logloss(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4], &[1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        assert!(auc(&[0.1, 0.2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let a = [3.0, 1.0, 2.0, 5.0];
        let b: Vec<f64> = a.iter().map(|x: &f64| x.powi(3)).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-15);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![(0u8..5).prop_map(|k| k as f64 / 4.0), 0.0f64..1.0], n),
                proptest::collection::vec(0u8..2, n),
            )
                .prop_filter_map("needs both classes", |(s, y)| {
                    let y: Vec<f64> = y.into_iter().map(f64::from).collect();
                    let pos = y.iter().filter(|&&v| v == 1.0).count();
                    (pos > 0 && pos < y.len()).then_some((s, y))
                })
        })
    }

    proptest! {
        #[test]
        fn sorted_auc_equals_pair_count((s, y) in scored()) {
            prop_assert!((auc(&s, &y).unwrap() - pair_count_auc(&s, &y)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_to_monotone_transform((s, y) in scored()) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert!((auc(&s, &y).unwrap() - auc(&t, &y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn auc_of_flipped_labels_complements((s, y) in scored()) {
            let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            prop_assert!((auc(&s, &y).unwrap() + auc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn logloss_is_non_negative((s, y) in scored()) {
            prop_assert!(logloss(&s, &y).unwrap() >= 0.0);
        }
    }
}
