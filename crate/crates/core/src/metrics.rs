//! Ranking metrics: AUC, user-weighted GAUC and log loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One scored impression, keyed by user for GAUC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredImpression {
    pub user: u32,
    pub score: f64,
    pub label: u8,
}

/// Area under the ROC curve via the rank-sum statistic; tied scores get half credit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auc",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += avg_rank * pos_in_tie as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-user AUC averaged with impression-count weights.
///
/// Users whose impressions are all one class have no AUC and are left out of
/// both numerator and denominator.
pub fn gauc(impressions: &[ScoredImpression]) -> Result<f64> {
    let mut by_user: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for imp in impressions {
        let e = by_user.entry(imp.user).or_default();
        e.0.push(imp.score);
        e.1.push(imp.label);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (scores, labels) in by_user.values() {
        match auc(scores, labels) {
            Ok(a) => {
                let w = scores.len() as f64;
                num += w * a;
                den += w;
            }
            Err(Error::UndefinedAuc) => {}
            Err(e) => return Err(e),
        }
    }
    if den == 0.0 {
        return Err(Error::NoEligibleUser);
    }
    Ok(num / den)
}

pub const LOG_LOSS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLoss {
    pub value: f64,
    /// How many probabilities fell outside `(0, 1)` and were clamped.
    pub clamped: usize,
}

/// Mean binary cross-entropy; probabilities are clamped to `[ε, 1−ε]`.
pub fn log_loss(probabilities: &[f64], labels: &[u8]) -> Result<LogLoss> {
    if probabilities.len() != labels.len() {
        return Err(Error::Dimension {
            op: "log_loss",
            left: vec![probabilities.len()],
            right: vec![labels.len()],
        });
    }
    if probabilities.is_empty() {
        return Err(Error::Contract("log loss of an empty set".into()));
    }
    let mut clamped = 0;
    let mut total = 0.0;
    for (&p, &y) in probabilities.iter().zip(labels) {
        if p.is_nan() {
            return Err(Error::NonFinite("probability".into()));
        }
        if p <= 0.0 || p >= 1.0 {
            clamped += 1;
        }
        let p = p.clamp(LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS);
        total -= if y != 0 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(LogLoss {
        value: total / probabilities.len() as f64,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc)));
        assert!(matches!(auc(&[], &[]), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn gauc_weighted_example() {
        let mut imps = vec![
            ScoredImpression { user: 0, score: 0.9, label: 1 },
            ScoredImpression { user: 0, score: 0.1, label: 0 },
        ];
        // User 1: 6 impressions, all scores tied, so AUC 0.5.
        for i in 0..6 {
            imps.push(ScoredImpression {
                user: 1,
                score: 0.3,
                label: (i % 2) as u8,
            });
        }
        assert_eq!(gauc(&imps).unwrap(), 0.625);
    }

    #[test]
    fn gauc_single_user_equals_auc() {
        let scores = [0.2, 0.7, 0.4, 0.9, 0.1];
        let labels = [0, 1, 1, 0, 0];
        let imps: Vec<ScoredImpression> = scores
            .iter()
            .zip(labels)
            .map(|(&score, label)| ScoredImpression { user: 4, score, label })
            .collect();
        assert_eq!(gauc(&imps).unwrap(), auc(&scores, &labels).unwrap());
    }

    #[test]
    fn gauc_skips_single_class_users() {
        let imps = [
            ScoredImpression { user: 0, score: 0.9, label: 1 },
            ScoredImpression { user: 0, score: 0.1, label: 0 },
            ScoredImpression { user: 1, score: 0.9, label: 0 },
            ScoredImpression { user: 1, score: 0.8, label: 0 },
        ];
        assert_eq!(gauc(&imps).unwrap(), 1.0);
        assert!(matches!(gauc(&imps[2..]), Err(Error::NoEligibleUser)));
    }

    #[test]
    fn log_loss_examples() {
        let l = log_loss(&[0.5, 0.5], &[1, 0]).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        let l = log_loss(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(l.value < 1e-11);
        assert_eq!(l.clamped, 2);
        let l = log_loss(&[0.9, 0.2], &[1, 0]).unwrap();
        // -(ln 0.9 + ln 0.8) / 2
        assert!((l.value - 0.164_252_033_486_018_1).abs() < 1e-12);
    }
}
