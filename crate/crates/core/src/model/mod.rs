//! The image-aware CTR network and its pre-rank two-tower variant.
//!
//! A [`CtrModel`] has three parts that live in different places at training
//! time: ID embedding tables (sharded over servers), the image embedding
//! model (replicated on every server) and the head (replicated on every
//! worker). Graph construction is shared by all training and inference paths
//! through [`RowSource`] and [`ImageSource`], which decide whether an
//! embedding enters the graph as a trainable leaf, a constant, or a full
//! in-graph computation.

mod aggregate;
mod embedding;
mod head;
mod image;
mod params;
mod schema;

use std::collections::BTreeMap;

pub use aggregate::Aggregator;
pub use embedding::{embed_field, FieldIds, IdKey, IdTables};
pub use head::{DicmHead, Head, PrerankHead};
pub use image::{FixedExtractor, ImageActivations, ImageEmbeddingModel};
pub use params::{glorot, splitmix64, ParamGroup, ParamStore};
pub use schema::{
    recent, AggregatorKind, AggregatorSpec, Architecture, FeatureSchema, FieldKind, FieldSource,
    FieldSpec, ModelConfig, Normalization,
};

use crate::data::{ImageFeatureStore, Sample};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Tensor, Var};

/// Store tags used when binding parameters into a graph.
pub const HEAD_STORE: u32 = 0;
pub const IMAGE_STORE: u32 = 1;

/// Per-sample graph inputs, in the order the head expects them.
#[derive(Clone, Debug)]
pub struct SampleVars {
    /// One vector per schema field (multi-hot fields already summed).
    pub fields: Vec<Var>,
    pub ad_image: Option<Var>,
    /// Behavior image embeddings, oldest first, truncated to `max_behaviors`.
    pub behaviors: Vec<Var>,
}

pub trait RowSource<'p> {
    fn row(&mut self, g: &mut Graph<'p>, key: IdKey) -> Result<Var>;
}

pub trait ImageSource<'p> {
    fn image(&mut self, g: &mut Graph<'p>, image: u32) -> Result<Var>;
}

/// Rows read from a map of pulled values; each distinct key becomes one leaf.
pub struct MapRows<'a> {
    rows: &'a BTreeMap<IdKey, Vec<f64>>,
    trainable: bool,
    pub vars: BTreeMap<IdKey, Var>,
}

impl<'a> MapRows<'a> {
    pub fn new(rows: &'a BTreeMap<IdKey, Vec<f64>>, trainable: bool) -> Self {
        Self {
            rows,
            trainable,
            vars: BTreeMap::new(),
        }
    }
}

impl<'p> RowSource<'p> for MapRows<'_> {
    fn row(&mut self, g: &mut Graph<'p>, key: IdKey) -> Result<Var> {
        if let Some(&v) = self.vars.get(&key) {
            return Ok(v);
        }
        let row = self
            .rows
            .get(&key)
            .ok_or_else(|| Error::Protocol(format!("id row {key:?} missing from pulled values")))?;
        let t = Tensor::vector(row.clone());
        let v = if self.trainable {
            g.input(t)
        } else {
            g.constant(t)
        };
        self.vars.insert(key, v);
        Ok(v)
    }
}

/// Rows read straight from full tables.
pub struct TableRows<'a> {
    tables: &'a IdTables,
    trainable: bool,
    pub vars: BTreeMap<IdKey, Var>,
}

impl<'a> TableRows<'a> {
    pub fn new(tables: &'a IdTables, trainable: bool) -> Self {
        Self {
            tables,
            trainable,
            vars: BTreeMap::new(),
        }
    }
}

impl<'p> RowSource<'p> for TableRows<'_> {
    fn row(&mut self, g: &mut Graph<'p>, key: IdKey) -> Result<Var> {
        if let Some(&v) = self.vars.get(&key) {
            return Ok(v);
        }
        let t = Tensor::vector(self.tables.row(key).to_vec());
        let v = if self.trainable {
            g.input(t)
        } else {
            g.constant(t)
        };
        self.vars.insert(key, v);
        Ok(v)
    }
}

/// Precomputed image embeddings; each distinct id becomes one leaf, so
/// repeated occurrences share (and sum) their gradient.
pub struct MapImages<'a> {
    embeddings: &'a BTreeMap<u32, Vec<f64>>,
    trainable: bool,
    pub vars: BTreeMap<u32, Var>,
}

impl<'a> MapImages<'a> {
    pub fn new(embeddings: &'a BTreeMap<u32, Vec<f64>>, trainable: bool) -> Self {
        Self {
            embeddings,
            trainable,
            vars: BTreeMap::new(),
        }
    }
}

impl<'p> ImageSource<'p> for MapImages<'_> {
    fn image(&mut self, g: &mut Graph<'p>, image: u32) -> Result<Var> {
        if let Some(&v) = self.vars.get(&image) {
            return Ok(v);
        }
        let e = self.embeddings.get(&image).ok_or_else(|| {
            Error::Protocol(format!("embedding for image {image} missing from response"))
        })?;
        let t = Tensor::vector(e.clone());
        let v = if self.trainable {
            g.input(t)
        } else {
            g.constant(t)
        };
        self.vars.insert(image, v);
        Ok(v)
    }
}

/// Runs the fixed extractor and the taped image model for every occurrence.
pub struct InlineImages<'a> {
    model: &'a ImageEmbeddingModel,
    vars: &'a [Var],
    extractor: &'a FixedExtractor,
    store: &'a ImageFeatureStore,
}

impl<'a> InlineImages<'a> {
    pub fn new(
        model: &'a ImageEmbeddingModel,
        vars: &'a [Var],
        extractor: &'a FixedExtractor,
        store: &'a ImageFeatureStore,
    ) -> Self {
        Self {
            model,
            vars,
            extractor,
            store,
        }
    }
}

impl<'p> ImageSource<'p> for InlineImages<'_> {
    fn image(&mut self, g: &mut Graph<'p>, image: u32) -> Result<Var> {
        let raw = self.extractor.extract(self.store, image)?;
        let x = g.constant(Tensor::vector(raw));
        self.model.forward_graph(g, self.vars, x)
    }
}

impl ModelConfig {
    /// Image ids whose embeddings a sample needs, in first-use order (may repeat).
    pub fn required_images(&self, sample: &Sample) -> Vec<u32> {
        let mut out = Vec::new();
        if self.needs_ad_image() {
            out.push(sample.ad_image);
        }
        if self.use_behavior_images {
            out.extend_from_slice(self.schema.behavior_images(sample));
        }
        out
    }

    /// ID rows a sample touches, validated against vocabulary sizes.
    pub fn required_rows(&self, sample: &Sample) -> Result<Vec<IdKey>> {
        let schema = &self.schema;
        let mut out = Vec::new();
        for (f, spec) in schema.fields.iter().enumerate() {
            for &id in schema.field_ids(spec, sample) {
                if id as usize >= spec.vocab {
                    return Err(Error::OutOfVocabulary {
                        field: spec.name.clone(),
                        id: u64::from(id),
                        vocab: spec.vocab,
                    });
                }
                out.push(IdKey {
                    field: f as u32,
                    id,
                });
            }
        }
        Ok(out)
    }

    /// Builds the graph leaves for one sample.
    pub fn sample_vars<'p>(
        &self,
        g: &mut Graph<'p>,
        sample: &Sample,
        rows: &mut dyn RowSource<'p>,
        images: &mut dyn ImageSource<'p>,
    ) -> Result<SampleVars> {
        let schema = &self.schema;
        let mut fields = Vec::with_capacity(schema.fields.len());
        for (f, spec) in schema.fields.iter().enumerate() {
            let ids = schema.field_ids(spec, sample);
            let mut vars = Vec::with_capacity(ids.len());
            for &id in ids {
                if id as usize >= spec.vocab {
                    return Err(Error::OutOfVocabulary {
                        field: spec.name.clone(),
                        id: u64::from(id),
                        vocab: spec.vocab,
                    });
                }
                vars.push(rows.row(
                    g,
                    IdKey {
                        field: f as u32,
                        id,
                    },
                )?);
            }
            let v = match (spec.kind, vars.len()) {
                (_, 0) => g.constant(Tensor::zeros(&[schema.id_dim])),
                (FieldKind::OneHot, 1) => vars[0],
                (FieldKind::OneHot, _) => {
                    return Err(Error::Contract(format!(
                        "one-hot field `{}` got {} ids",
                        spec.name,
                        vars.len()
                    )))
                }
                (FieldKind::MultiHot, _) => g.sum(&vars)?,
            };
            fields.push(v);
        }
        let ad_image = if self.needs_ad_image() {
            Some(images.image(g, sample.ad_image)?)
        } else {
            None
        };
        let mut behaviors = Vec::new();
        if self.use_behavior_images {
            for &img in schema.behavior_images(sample) {
                behaviors.push(images.image(g, img)?);
            }
        }
        Ok(SampleVars {
            fields,
            ad_image,
            behaviors,
        })
    }
}

/// Mean-style loss `Σ xent(logit_i, y_i) / normalizer` over `samples`.
///
/// Returns `None` for an empty slice. Workers pass the size of the whole
/// cluster batch as `normalizer`, so their summed gradients equal the
/// gradient of the mean loss over that batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'p>(
    g: &mut Graph<'p>,
    config: &ModelConfig,
    head: &Head,
    head_vars: &[Var],
    samples: &[&Sample],
    rows: &mut dyn RowSource<'p>,
    images: &mut dyn ImageSource<'p>,
    normalizer: usize,
) -> Result<Option<Var>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let sv = config.sample_vars(g, s, rows, images)?;
        let logit = head.logit(g, head_vars, &sv)?;
        terms.push(g.sigmoid_xent(logit, f64::from(s.label))?);
    }
    let total = g.sum(&terms)?;
    Ok(Some(g.scale(total, 1.0 / normalizer as f64)))
}

/// A prediction for one impression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    pub probability: f64,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        Self {
            logit,
            probability: sigmoid(logit),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtrModel {
    pub config: ModelConfig,
    pub extractor: FixedExtractor,
    pub id_tables: IdTables,
    pub image: ImageEmbeddingModel,
    pub head: Head,
}

impl CtrModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.schema.validate()?;
        let [h1, h2, out] = config.image_widths();
        if h1 == 0 || h2 == 0 {
            return Err(Error::Config("image hidden widths must be at least 1".into()));
        }
        let extractor = FixedExtractor::new(
            config.extractor_seed,
            config.image_latent_dim,
            config.schema.raw_dim,
        );
        let image = ImageEmbeddingModel::new([config.schema.raw_dim, h1, h2, out], seed);
        let id_tables = IdTables::new(&config.schema, seed, config.id_init_scale);
        let head = Head::new(&config, seed)?;
        Ok(Self {
            config,
            extractor,
            id_tables,
            image,
            head,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.config.schema
    }

    /// Image ids whose embeddings a sample needs, in first-use order (may repeat).
    pub fn required_images(&self, sample: &Sample) -> Vec<u32> {
        self.config.required_images(sample)
    }

    /// ID rows a sample touches, validated against vocabulary sizes.
    pub fn required_rows(&self, sample: &Sample) -> Result<Vec<IdKey>> {
        self.config.required_rows(sample)
    }

    /// Builds the graph leaves for one sample.
    pub fn sample_vars<'p>(
        &self,
        g: &mut Graph<'p>,
        sample: &Sample,
        rows: &mut dyn RowSource<'p>,
        images: &mut dyn ImageSource<'p>,
    ) -> Result<SampleVars> {
        self.config.sample_vars(g, sample, rows, images)
    }

    /// Full-model prediction: fixed extractor, image model, embeddings and head.
    pub fn forward_ctr(&self, sample: &Sample, store: &ImageFeatureStore) -> Result<Prediction> {
        let mut g = Graph::new();
        let head_vars = self.head.params().bind(&mut g, HEAD_STORE);
        let image_vars = self.image.params.bind(&mut g, IMAGE_STORE);
        let mut rows = TableRows::new(&self.id_tables, false);
        let mut images = InlineImages::new(&self.image, &image_vars, &self.extractor, store);
        let sv = self.sample_vars(&mut g, sample, &mut rows, &mut images)?;
        let logit = self.head.logit(&mut g, &head_vars, &sv)?;
        Ok(Prediction::from_logit(g.value(logit).data()[0]))
    }

    /// Two-tower score (the inner product of both representations).
    pub fn forward_prerank(&self, sample: &Sample, store: &ImageFeatureStore) -> Result<f64> {
        let Head::TwoTower(_) = &self.head else {
            return Err(Error::Config("forward_prerank needs a two-tower model".into()));
        };
        Ok(self.forward_ctr(sample, store)?.logit)
    }

    /// Tower outputs for a two-tower model.
    pub fn prerank_representations(
        &self,
        sample: &Sample,
        store: &ImageFeatureStore,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let Head::TwoTower(h) = &self.head else {
            return Err(Error::Config("not a two-tower model".into()));
        };
        let mut g = Graph::new();
        let head_vars = self.head.params().bind(&mut g, HEAD_STORE);
        let image_vars = self.image.params.bind(&mut g, IMAGE_STORE);
        let mut rows = TableRows::new(&self.id_tables, false);
        let mut images = InlineImages::new(&self.image, &image_vars, &self.extractor, store);
        let sv = self.sample_vars(&mut g, sample, &mut rows, &mut images)?;
        let (u, a) = h.towers(&mut g, &head_vars, &sv)?;
        Ok((g.value(u).data().to_vec(), g.value(a).data().to_vec()))
    }

    /// `image_embed(fixed_extract(id))`.
    pub fn embed_image(&self, store: &ImageFeatureStore, image: u32) -> Result<Vec<f64>> {
        self.image.embed(&self.extractor.extract(store, image)?)
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<(&str, &Tensor)> {
        match group {
            ParamGroup::IdEmbeddings => self
                .config
                .schema
                .fields
                .iter()
                .zip(&self.id_tables.tables)
                .map(|(f, t)| (f.name.as_str(), t))
                .collect(),
            ParamGroup::ImageModel => named(&self.image.params, None),
            g => named(self.head.params(), Some(g)),
        }
    }
}

fn named(store: &ParamStore, group: Option<ParamGroup>) -> Vec<(&str, &Tensor)> {
    store
        .names()
        .iter()
        .zip(store.tensors())
        .zip(store.groups())
        .filter(|(_, g)| group.is_none_or(|want| **g == want))
        .map(|((n, t), _)| (n.as_str(), t))
        .collect()
}
