//! Quadratic reference implementations of the ranking metrics.

use std::collections::BTreeMap;

use dicm::metrics::ScoredImpression;

/// Share of positive/negative pairs ranked correctly, ties counted as half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut pairs = 0u64;
    let mut credit = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    (pairs > 0).then(|| credit / pairs as f64)
}

/// Impression-weighted mean of per-user pairwise AUCs over users with both classes.
pub fn brute_gauc(impressions: &[ScoredImpression]) -> Option<f64> {
    let mut users: BTreeMap<u32, Vec<&ScoredImpression>> = BTreeMap::new();
    for imp in impressions {
        users.entry(imp.user).or_default().push(imp);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for imps in users.values() {
        let scores: Vec<f64> = imps.iter().map(|i| i.score).collect();
        let labels: Vec<u8> = imps.iter().map(|i| i.label).collect();
        if let Some(a) = pairwise_auc(&scores, &labels) {
            num += imps.len() as f64 * a;
            den += imps.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}
