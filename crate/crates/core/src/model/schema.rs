use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};

/// Where an ID field reads its values from in a [`Sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldSource {
    User,
    Scenario,
    Ad,
    Category,
    BehaviorItems,
}

impl FieldSource {
    /// Ad-side fields describe the candidate; everything else describes the user or context.
    pub fn is_ad_side(self) -> bool {
        matches!(self, FieldSource::Ad | FieldSource::Category)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    OneHot,
    MultiHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub source: FieldSource,
    pub vocab: usize,
    pub kind: FieldKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    pub id_dim: usize,
    pub raw_dim: usize,
    pub image_dim: usize,
    pub max_behaviors: usize,
}

impl FeatureSchema {
    /// User, scenario, ad, category and multi-hot behavior-item fields.
    pub fn standard(users: usize, scenarios: usize, items: usize, categories: usize) -> Self {
        let field = |name: &str, source, vocab, kind| FieldSpec {
            name: name.to_string(),
            source,
            vocab,
            kind,
        };
        Self {
            fields: vec![
                field("user", FieldSource::User, users, FieldKind::OneHot),
                field("scenario", FieldSource::Scenario, scenarios, FieldKind::OneHot),
                field("ad", FieldSource::Ad, items, FieldKind::OneHot),
                field("category", FieldSource::Category, categories, FieldKind::OneHot),
                field(
                    "behavior_items",
                    FieldSource::BehaviorItems,
                    items,
                    FieldKind::MultiHot,
                ),
            ],
            id_dim: 12,
            raw_dim: 64,
            image_dim: 12,
            max_behaviors: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("id_dim", self.id_dim),
            ("raw_dim", self.raw_dim),
            ("image_dim", self.image_dim),
            ("max_behaviors", self.max_behaviors),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("schema {what} must be at least 1")));
            }
        }
        for f in &self.fields {
            if f.vocab == 0 {
                return Err(Error::Config(format!(
                    "field `{}` needs a vocabulary of at least 1",
                    f.name
                )));
            }
            if f.kind == FieldKind::OneHot && f.source == FieldSource::BehaviorItems {
                return Err(Error::Config(format!(
                    "field `{}` reads a list and must be multi-hot",
                    f.name
                )));
            }
        }
        Ok(())
    }

    /// The ids a field takes for one sample, after behavior truncation.
    pub fn field_ids<'s>(&self, field: &FieldSpec, sample: &'s Sample) -> &'s [u32] {
        match field.source {
            FieldSource::User => std::slice::from_ref(&sample.user_id),
            FieldSource::Scenario => std::slice::from_ref(&sample.scenario_id),
            FieldSource::Ad => std::slice::from_ref(&sample.ad_id),
            FieldSource::Category => std::slice::from_ref(&sample.category_id),
            FieldSource::BehaviorItems => recent(&sample.behavior_items, self.max_behaviors),
        }
    }

    pub fn behavior_images<'s>(&self, sample: &'s Sample) -> &'s [u32] {
        recent(&sample.behavior_images, self.max_behaviors)
    }
}

/// The trailing (most recent) `cap` entries.
pub fn recent<T>(list: &[T], cap: usize) -> &[T] {
    &list[list.len().saturating_sub(cap)..]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    #[serde(alias = "concat")]
    Concatenate,
    #[serde(alias = "max")]
    MaxPooling,
    #[serde(alias = "sum")]
    SumPooling,
    #[serde(alias = "attn")]
    AttentivePooling,
    #[serde(alias = "multiquery-attn")]
    MultiQueryAttentivePooling,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 5] = [
        AggregatorKind::Concatenate,
        AggregatorKind::MaxPooling,
        AggregatorKind::SumPooling,
        AggregatorKind::AttentivePooling,
        AggregatorKind::MultiQueryAttentivePooling,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            AggregatorKind::Concatenate => "concat",
            AggregatorKind::MaxPooling => "max",
            AggregatorKind::SumPooling => "sum",
            AggregatorKind::AttentivePooling => "attn",
            AggregatorKind::MultiQueryAttentivePooling => "multiquery-attn",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.short_name() == s)
    }

    pub fn is_attentive(self) -> bool {
        matches!(
            self,
            AggregatorKind::AttentivePooling | AggregatorKind::MultiQueryAttentivePooling
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Softmax,
    /// Scores used directly as pooling weights.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    pub attention_hidden: usize,
    pub normalization: Normalization,
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::SumPooling,
            attention_hidden: 32,
            normalization: Normalization::Softmax,
        }
    }
}

impl AggregatorSpec {
    pub fn of(kind: AggregatorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    /// Full ranking network: embeddings, aggregator and an MLP head.
    Dicm {
        #[serde(default)]
        aggregator: AggregatorSpec,
        #[serde(default = "default_mlp_hidden")]
        mlp_hidden: Vec<usize>,
    },
    /// User and ad towers scored by inner product.
    TwoTower {
        #[serde(default = "default_tower_hidden")]
        tower_hidden: usize,
        #[serde(default = "default_rep_width")]
        user_width: usize,
        #[serde(default = "default_rep_width")]
        ad_width: usize,
    },
}

fn default_mlp_hidden() -> Vec<usize> {
    vec![128, 64]
}

fn default_tower_hidden() -> usize {
    64
}

fn default_rep_width() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema: FeatureSchema,
    pub architecture: Architecture,
    #[serde(default = "yes")]
    pub use_ad_image: bool,
    #[serde(default = "yes")]
    pub use_behavior_images: bool,
    /// Hidden widths of the trainable image net; derived from `raw_dim` when absent.
    #[serde(default)]
    pub image_hidden: Option<[usize; 2]>,
    #[serde(default = "default_extractor_seed")]
    pub extractor_seed: u64,
    /// Latent width of the image store the fixed extractor reads.
    #[serde(default = "default_latent_dim")]
    pub image_latent_dim: usize,
    #[serde(default = "default_id_init_scale")]
    pub id_init_scale: f64,
}

fn yes() -> bool {
    true
}

fn default_extractor_seed() -> u64 {
    0x5eed_f1c6
}

fn default_latent_dim() -> usize {
    8
}

fn default_id_init_scale() -> f64 {
    0.05
}

impl ModelConfig {
    pub fn dicm(schema: FeatureSchema, aggregator: AggregatorKind) -> Self {
        Self {
            schema,
            architecture: Architecture::Dicm {
                aggregator: AggregatorSpec::of(aggregator),
                mlp_hidden: default_mlp_hidden(),
            },
            use_ad_image: true,
            use_behavior_images: true,
            image_hidden: None,
            extractor_seed: default_extractor_seed(),
            image_latent_dim: default_latent_dim(),
            id_init_scale: default_id_init_scale(),
        }
    }

    pub fn two_tower(schema: FeatureSchema) -> Self {
        Self {
            architecture: Architecture::TwoTower {
                tower_hidden: default_tower_hidden(),
                user_width: default_rep_width(),
                ad_width: default_rep_width(),
            },
            ..Self::dicm(schema, AggregatorKind::SumPooling)
        }
    }

    pub fn id_only(mut self) -> Self {
        self.use_ad_image = false;
        self.use_behavior_images = false;
        self
    }

    /// `raw → raw/16 → raw/64 → image_dim`, floored at 32 and 16 for small inputs.
    pub fn image_widths(&self) -> [usize; 3] {
        let [h1, h2] = self.image_hidden.unwrap_or([
            (self.schema.raw_dim / 16).max(32),
            (self.schema.raw_dim / 64).max(16),
        ]);
        [h1, h2, self.schema.image_dim]
    }

    pub fn aggregator(&self) -> Option<&AggregatorSpec> {
        match &self.architecture {
            Architecture::Dicm { aggregator, .. } => Some(aggregator),
            Architecture::TwoTower { .. } => None,
        }
    }

    /// Whether the ad image embedding is computed (as an MLP input or an attention query).
    pub fn needs_ad_image(&self) -> bool {
        self.use_ad_image
            || (self.use_behavior_images
                && self.aggregator().is_some_and(|a| a.kind.is_attentive()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn production_scale_image_widths() {
        let mut schema = FeatureSchema::standard(1, 1, 1, 1);
        schema.raw_dim = 4096;
        let cfg = ModelConfig::dicm(schema, AggregatorKind::SumPooling);
        assert_eq!(cfg.image_widths(), [256, 64, 12]);
    }

    #[test]
    fn recency_truncation() {
        let v: Vec<u32> = (0..200).collect();
        assert_eq!(recent(&v, 32), &v[168..]);
        assert_eq!(recent(&v[..5], 32), &v[..5]);
    }

    #[test]
    fn aggregator_names_parse() {
        for k in AggregatorKind::ALL {
            assert_eq!(AggregatorKind::from_short_name(k.short_name()), Some(k));
        }
    }

    #[test]
    fn zero_vocab_rejected() {
        let mut s = FeatureSchema::standard(3, 1, 4, 2);
        s.fields[2].vocab = 0;
        assert!(s.validate().is_err());
    }
}
