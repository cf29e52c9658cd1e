//! Pooling a variable-length list of behavior image embeddings into one
//! fixed-width user vector.

use rand::Rng;

use super::params::{push_dense, DenseLayer, ParamGroup, ParamStore};
use super::schema::{recent, AggregatorKind, AggregatorSpec, Normalization};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// One attention channel: a one-hidden-layer net scoring `[query ‖ key]`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttentionNet {
    hidden: DenseLayer,
    score: DenseLayer,
}

impl AttentionNet {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        query_width: usize,
        key_width: usize,
        hidden: usize,
    ) -> Self {
        let g = ParamGroup::Attention;
        Self {
            hidden: push_dense(
                store,
                rng,
                &format!("{name}.fc1"),
                g,
                query_width + key_width,
                hidden,
                true,
            ),
            score: push_dense(store, rng, &format!("{name}.fc2"), g, hidden, 1, false),
        }
    }

    fn pool(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        query: Var,
        keys: &[Var],
        normalization: Normalization,
    ) -> Result<Var> {
        let mut scores = Vec::with_capacity(keys.len());
        for &k in keys {
            let x = g.concat(&[query, k]);
            let h = self.hidden.apply(g, vars, x)?;
            scores.push(self.score.apply(g, vars, h)?);
        }
        let raw = g.stack(&scores)?;
        let weights = match normalization {
            Normalization::Softmax => g.softmax(raw)?,
            Normalization::Raw => raw,
        };
        g.weighted_sum(weights, keys)
    }
}

/// Aggregator parameters and shape bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    spec: AggregatorSpec,
    image_dim: usize,
    max_behaviors: usize,
    channels: Vec<AttentionNet>,
}

impl Aggregator {
    /// Appends attention parameters (if any) to `store`.
    pub fn new(
        spec: &AggregatorSpec,
        image_dim: usize,
        max_behaviors: usize,
        ad_query_width: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = spec.attention_hidden;
        let channels = match spec.kind {
            AggregatorKind::AttentivePooling => {
                vec![AttentionNet::new(store, rng, "attn.image", image_dim, image_dim, h)]
            }
            AggregatorKind::MultiQueryAttentivePooling => {
                if ad_query_width == 0 {
                    return Err(Error::Config(
                        "multi-query attention needs at least one ad-side ID field".into(),
                    ));
                }
                vec![
                    AttentionNet::new(store, rng, "attn.image", image_dim, image_dim, h),
                    AttentionNet::new(store, rng, "attn.id", ad_query_width, image_dim, h),
                ]
            }
            _ => Vec::new(),
        };
        Ok(Self {
            spec: spec.clone(),
            image_dim,
            max_behaviors,
            channels,
        })
    }

    pub fn spec(&self) -> &AggregatorSpec {
        &self.spec
    }

    pub fn output_width(&self) -> usize {
        match self.spec.kind {
            AggregatorKind::Concatenate => self.image_dim * self.max_behaviors,
            AggregatorKind::MultiQueryAttentivePooling => 2 * self.image_dim,
            _ => self.image_dim,
        }
    }

    /// Pools `behaviors` (oldest first). An empty list yields zeros of the output width.
    pub fn apply(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        behaviors: &[Var],
        ad_image: Option<Var>,
        ad_id_query: Option<Var>,
    ) -> Result<Var> {
        if behaviors.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[self.output_width()])));
        }
        let norm = self.spec.normalization;
        let query = |q: Option<Var>, what: &str| {
            q.ok_or_else(|| Error::Contract(format!("attentive pooling needs the {what} query")))
        };
        match self.spec.kind {
            AggregatorKind::Concatenate => {
                let kept = recent(behaviors, self.max_behaviors);
                let mut parts = kept.to_vec();
                for _ in kept.len()..self.max_behaviors {
                    parts.push(g.constant(Tensor::zeros(&[self.image_dim])));
                }
                Ok(g.concat(&parts))
            }
            AggregatorKind::MaxPooling => g.max(behaviors),
            AggregatorKind::SumPooling => g.sum(behaviors),
            AggregatorKind::AttentivePooling => {
                let q = query(ad_image, "ad image")?;
                self.channels[0].pool(g, vars, q, behaviors, norm)
            }
            AggregatorKind::MultiQueryAttentivePooling => {
                let qi = query(ad_image, "ad image")?;
                let qa = query(ad_id_query, "ad ID")?;
                let a = self.channels[0].pool(g, vars, qi, behaviors, norm)?;
                let b = self.channels[1].pool(g, vars, qa, behaviors, norm)?;
                Ok(g.concat(&[a, b]))
            }
        }
    }
}
