use super::aggregate::Aggregator;
use super::params::{push_dense, DenseLayer, ParamGroup, ParamStore};
use super::schema::{Architecture, ModelConfig};
use super::SampleVars;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Ranking head: concatenated embeddings and pooled behaviors through an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct DicmHead {
    pub params: ParamStore,
    aggregator: Aggregator,
    mlp: Vec<DenseLayer>,
    input_width: usize,
    ad_fields: Vec<usize>,
    use_ad_image: bool,
    use_behavior_images: bool,
}

impl DicmHead {
    fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let Architecture::Dicm {
            aggregator,
            mlp_hidden,
        } = &config.architecture
        else {
            return Err(Error::Config("not a ranking architecture".into()));
        };
        let schema = &config.schema;
        let ad_fields: Vec<usize> = schema
            .fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.source.is_ad_side() && f.kind == super::FieldKind::OneHot)
            .map(|(i, _)| i)
            .collect();
        let mut params = ParamStore::new();
        let mut attn_rng = ParamGroup::Attention.rng(seed);
        let aggregator = Aggregator::new(
            aggregator,
            schema.image_dim,
            schema.max_behaviors,
            ad_fields.len() * schema.id_dim,
            &mut params,
            &mut attn_rng,
        )?;
        let mut input_width = schema.fields.len() * schema.id_dim;
        if config.use_ad_image {
            input_width += schema.image_dim;
        }
        if config.use_behavior_images {
            input_width += aggregator.output_width();
        }
        let mut rng = ParamGroup::Mlp.rng(seed);
        let mut mlp = Vec::new();
        let mut width = input_width;
        for (i, &h) in mlp_hidden.iter().enumerate() {
            if h == 0 {
                return Err(Error::Config("MLP widths must be at least 1".into()));
            }
            mlp.push(push_dense(
                &mut params,
                &mut rng,
                &format!("mlp.fc{}", i + 1),
                ParamGroup::Mlp,
                width,
                h,
                true,
            ));
            width = h;
        }
        mlp.push(push_dense(
            &mut params,
            &mut rng,
            &format!("mlp.fc{}", mlp_hidden.len() + 1),
            ParamGroup::Mlp,
            width,
            1,
            false,
        ));
        Ok(Self {
            params,
            aggregator,
            mlp,
            input_width,
            ad_fields,
            use_ad_image: config.use_ad_image,
            use_behavior_images: config.use_behavior_images,
        })
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn mlp_input_width(&self) -> usize {
        self.input_width
    }

    pub fn logit(&self, g: &mut Graph<'_>, vars: &[Var], s: &SampleVars) -> Result<Var> {
        let mut parts = s.fields.clone();
        if self.use_ad_image {
            parts.push(need(s.ad_image)?);
        }
        if self.use_behavior_images {
            let ad_query = if self.ad_fields.is_empty() {
                None
            } else {
                let q: Vec<Var> = self.ad_fields.iter().map(|&i| s.fields[i]).collect();
                Some(g.concat(&q))
            };
            let pooled = self
                .aggregator
                .apply(g, vars, &s.behaviors, s.ad_image, ad_query)?;
            parts.push(pooled);
        }
        let mut h = g.concat(&parts);
        if g.value(h).len() != self.input_width {
            return Err(Error::Dimension {
                op: "mlp input",
                left: vec![self.input_width],
                right: vec![g.value(h).len()],
            });
        }
        for layer in &self.mlp {
            h = layer.apply(g, vars, h)?;
        }
        Ok(h)
    }
}

fn need(v: Option<Var>) -> Result<Var> {
    v.ok_or_else(|| Error::Contract("sample inputs lack the ad image embedding".into()))
}

/// Pre-rank head: user and ad towers whose inner product is the logit.
#[derive(Clone, Debug, PartialEq)]
pub struct PrerankHead {
    pub params: ParamStore,
    user_tower: [DenseLayer; 2],
    ad_tower: [DenseLayer; 2],
    user_fields: Vec<usize>,
    ad_fields: Vec<usize>,
    image_dim: usize,
    use_ad_image: bool,
    use_behavior_images: bool,
}

impl PrerankHead {
    fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let Architecture::TwoTower {
            tower_hidden,
            user_width,
            ad_width,
        } = config.architecture
        else {
            return Err(Error::Config("not a two-tower architecture".into()));
        };
        if user_width != ad_width {
            return Err(Error::Config(format!(
                "tower widths differ: user {user_width}, ad {ad_width}"
            )));
        }
        let schema = &config.schema;
        let (ad_fields, user_fields): (Vec<usize>, Vec<usize>) =
            (0..schema.fields.len()).partition(|&i| schema.fields[i].source.is_ad_side());
        let d = schema.id_dim;
        let user_in = user_fields.len() * d
            + if config.use_behavior_images {
                schema.image_dim
            } else {
                0
            };
        let ad_in = ad_fields.len() * d
            + if config.use_ad_image {
                schema.image_dim
            } else {
                0
            };
        if user_in == 0 || ad_in == 0 {
            return Err(Error::Config("each tower needs at least one input".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ParamGroup::Mlp.rng(seed);
        let g = ParamGroup::Mlp;
        let r = user_width;
        let user_tower = [
            push_dense(&mut params, &mut rng, "user.fc1", g, user_in, tower_hidden, true),
            push_dense(&mut params, &mut rng, "user.fc2", g, tower_hidden, r, false),
        ];
        let ad_tower = [
            push_dense(&mut params, &mut rng, "ad.fc1", g, ad_in, tower_hidden, true),
            push_dense(&mut params, &mut rng, "ad.fc2", g, tower_hidden, r, false),
        ];
        Ok(Self {
            params,
            user_tower,
            ad_tower,
            user_fields,
            ad_fields,
            image_dim: schema.image_dim,
            use_ad_image: config.use_ad_image,
            use_behavior_images: config.use_behavior_images,
        })
    }

    /// `(user representation, ad representation)`.
    pub fn towers(&self, g: &mut Graph<'_>, vars: &[Var], s: &SampleVars) -> Result<(Var, Var)> {
        let mut user: Vec<Var> = self.user_fields.iter().map(|&i| s.fields[i]).collect();
        if self.use_behavior_images {
            let pooled = if s.behaviors.is_empty() {
                g.constant(Tensor::zeros(&[self.image_dim]))
            } else {
                g.sum(&s.behaviors)?
            };
            user.push(pooled);
        }
        let mut ad: Vec<Var> = self.ad_fields.iter().map(|&i| s.fields[i]).collect();
        if self.use_ad_image {
            ad.push(need(s.ad_image)?);
        }
        let mut u = g.concat(&user);
        for l in &self.user_tower {
            u = l.apply(g, vars, u)?;
        }
        let mut a = g.concat(&ad);
        for l in &self.ad_tower {
            a = l.apply(g, vars, a)?;
        }
        Ok((u, a))
    }

    pub fn logit(&self, g: &mut Graph<'_>, vars: &[Var], s: &SampleVars) -> Result<Var> {
        let (u, a) = self.towers(g, vars, s)?;
        g.dot(u, a)
    }
}

/// Worker-side network; its parameters are replicated on every worker.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Dicm(DicmHead),
    TwoTower(PrerankHead),
}

impl Head {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        match config.architecture {
            Architecture::Dicm { .. } => Ok(Head::Dicm(DicmHead::new(config, seed)?)),
            Architecture::TwoTower { .. } => Ok(Head::TwoTower(PrerankHead::new(config, seed)?)),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Head::Dicm(h) => &h.params,
            Head::TwoTower(h) => &h.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Head::Dicm(h) => &mut h.params,
            Head::TwoTower(h) => &mut h.params,
        }
    }

    pub fn logit(&self, g: &mut Graph<'_>, vars: &[Var], s: &SampleVars) -> Result<Var> {
        match self {
            Head::Dicm(h) => h.logit(g, vars, s),
            Head::TwoTower(h) => h.logit(g, vars, s),
        }
    }
}
