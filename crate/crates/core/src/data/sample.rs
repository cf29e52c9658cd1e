use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// One impression: who saw which ad where, the user's recent behaviors, and the click.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub user_id: u32,
    pub day: u32,
    pub scenario_id: u32,
    pub ad_id: u32,
    pub category_id: u32,
    pub ad_image: u32,
    /// Oldest first.
    pub behavior_items: Vec<u32>,
    pub behavior_images: Vec<u32>,
    pub label: u8,
}

impl Sample {
    /// Bytes needed to store the sample on its own, at 4 bytes per id.
    ///
    /// Layout: user, day, scenario, ad, category, ad image, label, behavior
    /// count, then both behavior lists.
    pub fn stored_bytes(&self) -> u64 {
        4 * (8 + 2 * self.behavior_items.len() as u64)
    }

    /// Total image references (ad image plus behavior images).
    pub fn image_refs(&self) -> usize {
        1 + self.behavior_images.len()
    }
}

/// The per-impression part of a sample once user features are factored out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impression {
    pub day: u32,
    pub scenario_id: u32,
    pub ad_id: u32,
    pub category_id: u32,
    pub ad_image: u32,
    pub label: u8,
}

/// Samples of one user sharing their common (user-side) features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub user_id: u32,
    pub behavior_items: Vec<u32>,
    pub behavior_images: Vec<u32>,
    pub impressions: Vec<Impression>,
}

impl SampleGroup {
    /// Layout: user, behavior count, both behavior lists, impression count,
    /// then six ids per impression.
    pub fn stored_bytes(&self) -> u64 {
        4 * (3 + 2 * self.behavior_items.len() as u64 + 6 * self.impressions.len() as u64)
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        self.impressions.iter().map(|imp| Sample {
            user_id: self.user_id,
            day: imp.day,
            scenario_id: imp.scenario_id,
            ad_id: imp.ad_id,
            category_id: imp.category_id,
            ad_image: imp.ad_image,
            behavior_items: self.behavior_items.clone(),
            behavior_images: self.behavior_images.clone(),
            label: imp.label,
        })
    }

    /// Image references once behaviors are shared: each behavior image once, plus one ad image per impression.
    pub fn image_refs(&self) -> usize {
        self.behavior_images.len() + self.impressions.len()
    }
}

/// Groups samples by user (and identical behavior lists), in order of first appearance.
pub fn group_common_features(samples: &[Sample]) -> Vec<SampleGroup> {
    let mut index: HashMap<(u32, &[u32], &[u32]), usize> = HashMap::new();
    let mut groups: Vec<SampleGroup> = Vec::new();
    for s in samples {
        let key = (
            s.user_id,
            s.behavior_items.as_slice(),
            s.behavior_images.as_slice(),
        );
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push(SampleGroup {
                user_id: s.user_id,
                behavior_items: s.behavior_items.clone(),
                behavior_images: s.behavior_images.clone(),
                impressions: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].impressions.push(Impression {
            day: s.day,
            scenario_id: s.scenario_id,
            ad_id: s.ad_id,
            category_id: s.category_id,
            ad_image: s.ad_image,
            label: s.label,
        });
    }
    groups
}

pub fn ungroup(groups: &[SampleGroup]) -> Vec<Sample> {
    groups.iter().flat_map(SampleGroup::samples).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(user: u32, ad: u32, behaviors: &[u32]) -> Sample {
        Sample {
            user_id: user,
            day: 0,
            scenario_id: 1,
            ad_id: ad,
            category_id: ad % 3,
            ad_image: ad + 100,
            behavior_items: behaviors.to_vec(),
            behavior_images: behaviors.iter().map(|b| b + 100).collect(),
            label: (ad % 2) as u8,
        }
    }

    #[test]
    fn one_user_many_samples_is_one_group() {
        let s: Vec<Sample> = (0..5).map(|a| sample(7, a, &[1, 2])).collect();
        let g = group_common_features(&s);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].impressions.len(), 5);
    }

    #[test]
    fn distinct_users_are_distinct_groups() {
        let s: Vec<Sample> = (0..4).map(|u| sample(u, 3, &[u])).collect();
        assert_eq!(group_common_features(&s).len(), 4);
    }

    #[test]
    fn grouped_storage_is_smaller_with_repeat_users() {
        // Three users: 3, 1 and 2 impressions, 4 behaviors each.
        let mut s = Vec::new();
        for (user, count) in [(0, 3), (1, 1), (2, 2)] {
            for a in 0..count {
                s.push(sample(user, a, &[9, 8, 7, 6]));
            }
        }
        let ungrouped: u64 = s.iter().map(Sample::stored_bytes).sum();
        let grouped: u64 = group_common_features(&s)
            .iter()
            .map(SampleGroup::stored_bytes)
            .sum();
        // 6 samples × 4·(8+8) = 384; groups 4·(3+8+6k) for k = 3, 1, 2 → 116 + 68 + 92.
        assert_eq!(ungrouped, 384);
        assert_eq!(grouped, 276);
        assert!(grouped < ungrouped);
    }

    #[test]
    fn ungroup_restores_samples() {
        let s = vec![
            sample(1, 0, &[3]),
            sample(2, 1, &[]),
            sample(1, 2, &[3]),
            sample(1, 3, &[4]),
        ];
        let mut back = ungroup(&group_common_features(&s));
        let mut orig = s.clone();
        back.sort();
        orig.sort();
        assert_eq!(back, orig);
    }
}
