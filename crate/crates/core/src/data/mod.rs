//! Synthetic impressions, common-feature grouping, the image store and file formats.

mod batches;
mod images;
mod io;
mod sample;
mod synthetic;

pub use batches::{filter_behaviors, minibatches};
pub use images::{ImageFeatureStore, Matrix32, MATRIX_HEADER_BYTES, MATRIX_MAGIC, MATRIX_VERSION};
pub use io::{read_samples, write_samples};
pub use sample::{group_common_features, ungroup, Impression, Sample, SampleGroup};
pub use synthetic::{generate, sigmoid_mean_bias, Dataset, GroundTruth, SyntheticConfig};
