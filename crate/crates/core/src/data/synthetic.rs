//! Synthetic CTR logs with a controllable visual signal.
//!
//! Each user has an ID latent and a few visual interest directions in image
//! latent space. Behaviors are items whose images lie near one of those
//! directions. The click logit is
//!
//! ```text
//! bias + id_coef·⟨u, a⟩/√k + visual_coef·max_c ⟨c, z_ad⟩ + quality_coef·q(z_ad) + scenario + noise
//! ```
//!
//! so the visual part can only be recovered through image latents (the ad's
//! own image and the user's behavior images). The bias is solved so the
//! expected click rate equals `base_ctr`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::batches::filter_behaviors;
use super::images::ImageFeatureStore;
use super::sample::Sample;
use crate::error::{Error, Result};
use crate::model::{splitmix64, FeatureSchema};
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    /// Distinct images; `0` means one image per item.
    pub images: usize,
    pub categories: usize,
    pub scenarios: usize,
    pub id_latent_dim: usize,
    pub image_latent_dim: usize,
    pub interests_per_user: usize,
    pub id_coef: f64,
    /// Weight of the user-interest × ad-image term (the visual signal).
    pub visual_coef: f64,
    /// Weight of the ad-image-only attractiveness term.
    pub quality_coef: f64,
    pub scenario_coef: f64,
    pub noise: f64,
    pub base_ctr: f64,
    pub behaviors_min: usize,
    /// Cap on behaviors generated before filtering.
    pub behaviors_max: usize,
    /// Behaviors kept per user after recency filtering.
    pub max_behaviors: usize,
    pub behavior_candidates: usize,
    pub behavior_selectivity: f64,
    pub train_days: u32,
    pub impressions_per_user_day: usize,
    /// Share of items held out of training entirely (new on the test day).
    pub cold_start_fraction: f64,
    pub seed: u64,
    /// Overrides the seed for image latents only.
    pub image_seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 300,
            images: 0,
            categories: 20,
            scenarios: 4,
            id_latent_dim: 8,
            image_latent_dim: 8,
            interests_per_user: 1,
            id_coef: 1.0,
            visual_coef: 3.0,
            quality_coef: 0.5,
            scenario_coef: 0.3,
            noise: 0.3,
            base_ctr: 0.2,
            behaviors_min: 10,
            behaviors_max: 200,
            max_behaviors: 16,
            behavior_candidates: 16,
            behavior_selectivity: 3.0,
            train_days: 3,
            impressions_per_user_day: 5,
            cold_start_fraction: 0.2,
            seed: 1,
            image_seed: None,
        }
    }
}

impl SyntheticConfig {
    /// The standard feature schema sized for this dataset.
    pub fn schema(&self) -> FeatureSchema {
        let mut s = FeatureSchema::standard(self.users, self.scenarios, self.items, self.categories);
        s.max_behaviors = self.max_behaviors;
        s
    }

    pub fn image_count(&self) -> usize {
        if self.images == 0 {
            self.items
        } else {
            self.images
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("items", self.items),
            ("categories", self.categories),
            ("scenarios", self.scenarios),
            ("id_latent_dim", self.id_latent_dim),
            ("image_latent_dim", self.image_latent_dim),
            ("interests_per_user", self.interests_per_user),
            ("behaviors_max", self.behaviors_max),
            ("max_behaviors", self.max_behaviors),
            ("behavior_candidates", self.behavior_candidates),
            ("train_days", self.train_days as usize),
            ("impressions_per_user_day", self.impressions_per_user_day),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be at least 1")));
            }
        }
        if self.image_count() > self.items {
            return Err(Error::Config("data.images cannot exceed data.items".into()));
        }
        if self.behaviors_min > self.behaviors_max {
            return Err(Error::Config(
                "data.behaviors_min exceeds data.behaviors_max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cold_start_fraction) {
            return Err(Error::Config(
                "data.cold_start_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return Err(Error::Config("data.base_ctr must lie in (0, 1)".into()));
        }
        if self.cold_items() >= self.items {
            return Err(Error::Config(
                "cold-start fraction leaves no items for training".into(),
            ));
        }
        Ok(())
    }

    fn cold_items(&self) -> usize {
        (self.cold_start_fraction * self.items as f64).round() as usize
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(stream)))
    }
}

/// Generator internals exposed for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub bias: f64,
    /// Click logits before the bias (noise included), aligned with `train` and `test`.
    pub train_logits: Vec<f64>,
    pub test_logits: Vec<f64>,
    pub cold_items: Vec<u32>,
    pub item_image: Vec<u32>,
    pub item_category: Vec<u32>,
    /// Behavior counts per user before recency filtering.
    pub pre_filter_lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub images: ImageFeatureStore,
    pub truth: GroundTruth,
}

/// Bias `b` with `mean(sigmoid(b + z)) = target`, by bisection.
pub fn sigmoid_mean_bias(logits: &[f64], target: f64) -> f64 {
    let mean = |b: f64| logits.iter().map(|z| sigmoid(b + z)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn latent64(store: &ImageFeatureStore, image: u32) -> Vec<f64> {
    store
        .latent(image)
        .expect("generated image id")
        .iter()
        .map(|&v| f64::from(v))
        .collect()
}

struct User {
    id_latent: Vec<f64>,
    interests: Vec<Vec<f64>>,
    behaviors: Vec<u32>,
}

pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let k_id = config.id_latent_dim;
    let k_img = config.image_latent_dim;
    let n_images = config.image_count();

    // Image latents come from their own stream so the visual world can be
    // swapped without touching anything else.
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
        config.image_seed.unwrap_or(config.seed) ^ 0x1a6e5,
    ));
    let latents: Vec<f32> = (0..n_images * k_img)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    let images = ImageFeatureStore::new(k_img, latents)?;

    let mut rng = config.rng(1);
    let category_latents: Vec<Vec<f64>> = (0..config.categories)
        .map(|_| normal_vec(&mut rng, k_id))
        .collect();
    let mut item_category = Vec::with_capacity(config.items);
    let mut item_latent = Vec::with_capacity(config.items);
    let mut item_image = Vec::with_capacity(config.items);
    for i in 0..config.items {
        let c = rng.gen_range(0..config.categories);
        let r = normal_vec(&mut rng, k_id);
        let a: Vec<f64> = category_latents[c]
            .iter()
            .zip(&r)
            .map(|(cv, rv)| (cv + 0.7 * rv) / 1.49f64.sqrt())
            .collect();
        item_category.push(c as u32);
        item_latent.push(a);
        item_image.push(if n_images == config.items {
            i as u32
        } else {
            rng.gen_range(0..n_images) as u32
        });
    }
    let mut order: Vec<u32> = (0..config.items as u32).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut cold_items: Vec<u32> = order[..config.cold_items()].to_vec();
    cold_items.sort_unstable();
    let mut is_cold = vec![false; config.items];
    for &c in &cold_items {
        is_cold[c as usize] = true;
    }
    let warm: Vec<u32> = (0..config.items as u32)
        .filter(|&i| !is_cold[i as usize])
        .collect();
    let quality_dir = normal_vec(&mut rng, k_img);
    let scenario_effect = normal_vec(&mut rng, config.scenarios);

    let mut rng = config.rng(2);
    let mut users: Vec<User> = (0..config.users)
        .map(|_| {
            let id_latent = normal_vec(&mut rng, k_id);
            let interests = (0..config.interests_per_user)
                .map(|_| {
                    let v = normal_vec(&mut rng, k_img);
                    let n = dot(&v, &v).sqrt().max(1e-12);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            User {
                id_latent,
                interests,
                behaviors: Vec::new(),
            }
        })
        .collect();

    let mut rng = config.rng(3);
    let mut pre_filter_lengths = Vec::with_capacity(users.len());
    let mut scores = vec![0.0; config.behavior_candidates];
    let mut candidates = vec![0u32; config.behavior_candidates];
    for user in &mut users {
        let len = rng.gen_range(config.behaviors_min..=config.behaviors_max);
        pre_filter_lengths.push(len);
        let mut history = Vec::with_capacity(len);
        for _ in 0..len {
            let center = &user.interests[rng.gen_range(0..user.interests.len())];
            for (slot, score) in candidates.iter_mut().zip(scores.iter_mut()) {
                *slot = warm[rng.gen_range(0..warm.len())];
                let z = latent64(&images, item_image[*slot as usize]);
                *score = config.behavior_selectivity * dot(center, &z);
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = candidates[candidates.len() - 1];
            for (c, s) in candidates.iter().zip(&scores) {
                u -= (s - m).exp();
                if u <= 0.0 {
                    pick = *c;
                    break;
                }
            }
            history.push(pick);
        }
        user.behaviors = filter_behaviors(&history, config.max_behaviors);
    }

    let mut rng = config.rng(4);
    let quality_scale = 1.0 / (k_img as f64).sqrt();
    let id_scale = 1.0 / (k_id as f64).sqrt();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_logits = Vec::new();
    let mut test_logits = Vec::new();
    for day in 0..=config.train_days {
        let is_test = day == config.train_days;
        for (uid, user) in users.iter().enumerate() {
            for _ in 0..config.impressions_per_user_day {
                let ad = if is_test {
                    rng.gen_range(0..config.items as u32)
                } else {
                    warm[rng.gen_range(0..warm.len())]
                };
                let scenario = rng.gen_range(0..config.scenarios);
                let noise: f64 = StandardNormal.sample(&mut rng);
                let image = item_image[ad as usize];
                let z = latent64(&images, image);
                let visual = user
                    .interests
                    .iter()
                    .map(|c| dot(c, &z))
                    .fold(f64::NEG_INFINITY, f64::max);
                let logit = config.id_coef * id_scale * dot(&user.id_latent, &item_latent[ad as usize])
                    + config.visual_coef * visual
                    + config.quality_coef * quality_scale * dot(&quality_dir, &z)
                    + config.scenario_coef * scenario_effect[scenario]
                    + config.noise * noise;
                let sample = Sample {
                    user_id: uid as u32,
                    day,
                    scenario_id: scenario as u32,
                    ad_id: ad,
                    category_id: item_category[ad as usize],
                    ad_image: image,
                    behavior_items: user.behaviors.clone(),
                    behavior_images: user
                        .behaviors
                        .iter()
                        .map(|&b| item_image[b as usize])
                        .collect(),
                    label: 0,
                };
                if is_test {
                    test.push(sample);
                    test_logits.push(logit);
                } else {
                    train.push(sample);
                    train_logits.push(logit);
                }
            }
        }
    }

    let all: Vec<f64> = train_logits.iter().chain(&test_logits).copied().collect();
    let bias = sigmoid_mean_bias(&all, config.base_ctr);
    let mut rng = config.rng(5);
    for (s, z) in train
        .iter_mut()
        .zip(&train_logits)
        .chain(test.iter_mut().zip(&test_logits))
    {
        let p = sigmoid(bias + z);
        s.label = u8::from(rng.gen::<f64>() < p);
    }

    Ok(Dataset {
        train,
        test,
        images,
        truth: GroundTruth {
            bias,
            train_logits,
            test_logits,
            cold_items,
            item_image,
            item_category,
            pre_filter_lengths,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            users: 50,
            items: 80,
            train_days: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn behaviors_and_images_stay_aligned() {
        let d = generate(&small()).unwrap();
        for s in d.train.iter().chain(&d.test) {
            assert_eq!(s.behavior_items.len(), s.behavior_images.len());
            assert!(s.behavior_items.len() <= 32);
            assert!(s.label <= 1);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.cold_start_fraction = 1.5;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.images = c.items + 1;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.users = 0;
        assert!(generate(&c).is_err());
    }
}
