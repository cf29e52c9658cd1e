//! Storage and traffic of the three image-placement strategies, computed from
//! batch statistics without training.
//!
//! All sizes use 4 bytes per feature element. Per mini-batch of the whole
//! cluster, with `refs` image references after common-feature grouping
//! (behaviors once per user group, plus one ad image per impression),
//! `unique` distinct images and `keys` distinct ID rows:
//!
//! | mode              | worker storage              | server storage | image traffic            |
//! |-------------------|-----------------------------|----------------|--------------------------|
//! | store-in-worker   | samples + refs · D_raw · 4  | 0              | 0                        |
//! | ps-store-in-server| samples                     | images         | refs · D_raw · 4         |
//! | ams               | samples                     | images         | 2 · unique · d_img · 4   |
//!
//! AMS image traffic counts embeddings going down and their gradients coming
//! back. ID traffic is `2 · keys · d_id · 4` (pull and push) in every mode,
//! and "all" traffic is ID plus image traffic. Server storage holds every
//! distinct image of the dataset as a raw feature once; its per-batch value
//! is that total spread over the batches.

use std::collections::BTreeSet;

use serde::Serialize;

use super::Mode;
use crate::data::{group_common_features, Sample};
use crate::model::{FeatureSchema, IdKey};

pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Clone, Copy, Debug)]
pub struct AccountingInput<'a> {
    pub schema: &'a FeatureSchema,
    pub samples: &'a [Sample],
    /// Samples per cluster mini-batch (workers × batch per worker).
    pub global_batch: usize,
}

/// Statistics of one mini-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BatchStats {
    pub samples: usize,
    pub groups: usize,
    pub sample_bytes: u64,
    pub image_refs: u64,
    pub unique_images: u64,
    pub unique_id_keys: u64,
}

impl BatchStats {
    pub fn of(schema: &FeatureSchema, batch: &[Sample]) -> Self {
        let groups = group_common_features(batch);
        let mut images = BTreeSet::new();
        let mut keys = BTreeSet::new();
        for s in batch {
            images.insert(s.ad_image);
            images.extend(s.behavior_images.iter().copied());
            for (f, spec) in schema.fields.iter().enumerate() {
                for &id in schema.field_ids(spec, s) {
                    keys.insert(IdKey {
                        field: f as u32,
                        id,
                    });
                }
            }
        }
        Self {
            samples: batch.len(),
            groups: groups.len(),
            sample_bytes: groups.iter().map(|g| g.stored_bytes()).sum(),
            image_refs: groups.iter().map(|g| g.image_refs() as u64).sum(),
            unique_images: images.len() as u64,
            unique_id_keys: keys.len() as u64,
        }
    }
}

/// One row of the table: totals over the run and per-batch averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub worker_storage: u64,
    pub server_storage: u64,
    pub comm_all: u64,
    pub comm_image: u64,
    pub batches: usize,
}

impl ModeReport {
    pub fn per_batch(&self, total: u64) -> f64 {
        total as f64 / self.batches.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StorageReport {
    pub raw_dim: usize,
    pub image_dim: usize,
    pub id_dim: usize,
    pub batches: Vec<BatchStats>,
    pub dataset_unique_images: u64,
    /// Bytes of all ID embedding tables (reported separately from the table).
    pub id_param_bytes: u64,
    pub rows: Vec<ModeReport>,
}

impl StorageReport {
    pub fn row(&self, mode: Mode) -> &ModeReport {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .expect("every mode has a row")
    }

    /// Bytes per image on the wire, store-in-server over AMS (one direction).
    pub fn compression_ratio(&self) -> f64 {
        self.raw_dim as f64 / self.image_dim as f64
    }
}

pub fn accounting(input: AccountingInput<'_>) -> StorageReport {
    let schema = input.schema;
    let d_raw = schema.raw_dim as u64;
    let d_img = schema.image_dim as u64;
    let d_id = schema.id_dim as u64;
    let batches: Vec<BatchStats> = input
        .samples
        .chunks(input.global_batch.max(1))
        .map(|b| BatchStats::of(schema, b))
        .collect();
    let dataset_images: BTreeSet<u32> = input
        .samples
        .iter()
        .flat_map(|s| std::iter::once(s.ad_image).chain(s.behavior_images.iter().copied()))
        .collect();
    let dataset_unique_images = dataset_images.len() as u64;
    let image_store = dataset_unique_images * d_raw * BYTES_PER_ELEMENT;

    let sum = |f: &dyn Fn(&BatchStats) -> u64| batches.iter().map(f).sum::<u64>();
    let samples = sum(&|b| b.sample_bytes);
    let id_comm = sum(&|b| 2 * b.unique_id_keys * d_id * BYTES_PER_ELEMENT);
    let raw_refs = sum(&|b| b.image_refs * d_raw * BYTES_PER_ELEMENT);
    let ams_image = sum(&|b| 2 * b.unique_images * d_img * BYTES_PER_ELEMENT);

    let n = batches.len();
    let rows = vec![
        ModeReport {
            mode: Mode::StoreInWorker,
            worker_storage: samples + raw_refs,
            server_storage: 0,
            comm_all: id_comm,
            comm_image: 0,
            batches: n,
        },
        ModeReport {
            mode: Mode::PsStoreInServer,
            worker_storage: samples,
            server_storage: image_store,
            comm_all: id_comm + raw_refs,
            comm_image: raw_refs,
            batches: n,
        },
        ModeReport {
            mode: Mode::Ams,
            worker_storage: samples,
            server_storage: image_store,
            comm_all: id_comm + ams_image,
            comm_image: ams_image,
            batches: n,
        },
    ];
    StorageReport {
        raw_dim: schema.raw_dim,
        image_dim: schema.image_dim,
        id_dim: schema.id_dim,
        batches,
        dataset_unique_images,
        id_param_bytes: schema
            .fields
            .iter()
            .map(|f| f.vocab as u64 * d_id * BYTES_PER_ELEMENT)
            .sum(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(user: u32, ad_image: u32, behaviors: &[u32]) -> Sample {
        Sample {
            user_id: user,
            day: 0,
            scenario_id: 0,
            ad_id: ad_image,
            category_id: 0,
            ad_image,
            behavior_items: behaviors.to_vec(),
            behavior_images: behaviors.to_vec(),
            label: 0,
        }
    }

    #[test]
    fn two_sample_batch_by_hand() {
        let mut schema = FeatureSchema::standard(4, 1, 10, 1);
        schema.raw_dim = 4096;
        let samples = vec![sample(0, 1, &[2, 3]), sample(0, 2, &[2, 3])];
        let r = accounting(AccountingInput {
            schema: &schema,
            samples: &samples,
            global_batch: 2,
        });
        let b = r.batches[0];
        // one group: behaviors [2, 3] once plus ad images 1 and 2
        assert_eq!(b.image_refs, 4);
        assert_eq!(b.unique_images, 3);
        assert_eq!(b.sample_bytes, 4 * (3 + 2 * 2 + 6 * 2));
        assert_eq!(r.row(Mode::StoreInWorker).comm_image, 0);
        assert_eq!(r.row(Mode::PsStoreInServer).comm_image, 4 * 4096 * 4);
        assert_eq!(r.row(Mode::Ams).comm_image, 2 * 3 * 12 * 4);
        assert_eq!(r.row(Mode::Ams).server_storage, 3 * 4096 * 4);
        assert!((r.compression_ratio() - 4096.0 / 12.0).abs() < 1e-12);
    }
}
