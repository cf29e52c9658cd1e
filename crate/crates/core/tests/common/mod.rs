#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use dicm::data::{generate, Dataset, SyntheticConfig};
use dicm::model::{AggregatorKind, AggregatorSpec, Architecture, CtrModel, ModelConfig};

/// A few dozen users with short behavior lists.
pub fn tiny_data(seed: u64) -> Dataset {
    generate(&tiny_data_config(seed)).expect("valid config")
}

pub fn tiny_data_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        users: 24,
        items: 40,
        categories: 5,
        scenarios: 2,
        behaviors_min: 2,
        behaviors_max: 12,
        max_behaviors: 6,
        train_days: 2,
        impressions_per_user_day: 2,
        seed,
        ..SyntheticConfig::default()
    }
}

/// Small widths everywhere so graphs stay cheap.
pub fn tiny_model_config(data: &SyntheticConfig, aggregator: AggregatorKind) -> ModelConfig {
    let mut schema = data.schema();
    schema.id_dim = 4;
    schema.raw_dim = 16;
    schema.image_dim = 4;
    let mut c = ModelConfig::dicm(schema, aggregator);
    c.architecture = Architecture::Dicm {
        aggregator: AggregatorSpec {
            attention_hidden: 6,
            ..AggregatorSpec::of(aggregator)
        },
        mlp_hidden: vec![10, 6],
    };
    c.image_hidden = Some([8, 6]);
    c.image_latent_dim = data.image_latent_dim;
    c
}

pub fn tiny_model(data: &SyntheticConfig, aggregator: AggregatorKind, seed: u64) -> CtrModel {
    CtrModel::new(tiny_model_config(data, aggregator), seed).expect("valid model")
}
