use rand::Rng;

use super::params::ParamGroup;
use super::schema::{FeatureSchema, FieldKind, FieldSpec};
use crate::error::{Error, Result};
use crate::numerics::{adam_update, AdamConfig, Tensor};

/// One row of one ID embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdKey {
    pub field: u32,
    pub id: u32,
}

impl IdKey {
    pub fn pack(self) -> u64 {
        (u64::from(self.field) << 32) | u64::from(self.id)
    }

    pub fn unpack(v: u64) -> Self {
        Self {
            field: (v >> 32) as u32,
            id: v as u32,
        }
    }
}

/// What an ID field looks up for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldIds<'a> {
    OneHot(u32),
    MultiHot(&'a [u32]),
}

/// Embedding tables for every ID field, with lazily updated per-row Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct IdTables {
    pub tables: Vec<Tensor>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl IdTables {
    pub fn new(schema: &FeatureSchema, seed: u64, scale: f64) -> Self {
        let mut rng = ParamGroup::IdEmbeddings.rng(seed);
        let tables: Vec<Tensor> = schema
            .fields
            .iter()
            .map(|f| {
                let data = (0..f.vocab * schema.id_dim)
                    .map(|_| rng.gen_range(-scale..scale))
                    .collect();
                Tensor::matrix(f.vocab, schema.id_dim, data).expect("shape")
            })
            .collect();
        let zeros: Vec<Tensor> = tables.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            tables,
        }
    }

    pub fn row(&self, key: IdKey) -> &[f64] {
        self.tables[key.field as usize].row(key.id as usize)
    }

    pub fn reset_optimizer(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|t| t.fill(0.0));
    }

    /// Lazy Adam: only rows with a gradient move, bias-corrected with the global `step`.
    pub fn apply_row_grads<'a>(
        &mut self,
        grads: impl IntoIterator<Item = (IdKey, &'a [f64])>,
        lr: f64,
        step: u64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (key, g) in grads {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of id row {key:?}")));
            }
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let (f, r) = (key.field as usize, key.id as usize);
            adam_update(
                self.tables[f].row_mut(r),
                g,
                self.m[f].row_mut(r),
                self.v[f].row_mut(r),
                lr,
                step,
                cfg,
            );
        }
        Ok(())
    }
}

/// Looks up a one-hot row or sums the rows of a multi-hot set.
pub fn embed_field(table: &Tensor, field: &FieldSpec, ids: FieldIds<'_>) -> Result<Vec<f64>> {
    let (vocab, dim) = table.dims2()?;
    let check = |id: u32| {
        if (id as usize) < vocab {
            Ok(id as usize)
        } else {
            Err(Error::OutOfVocabulary {
                field: field.name.clone(),
                id: u64::from(id),
                vocab,
            })
        }
    };
    match (field.kind, ids) {
        (_, FieldIds::OneHot(id)) => Ok(table.row(check(id)?).to_vec()),
        (FieldKind::MultiHot, FieldIds::MultiHot(set)) => {
            let mut out = vec![0.0; dim];
            for &id in set {
                for (o, x) in out.iter_mut().zip(table.row(check(id)?)) {
                    *o += x;
                }
            }
            Ok(out)
        }
        (FieldKind::OneHot, FieldIds::MultiHot(_)) => Err(Error::Contract(format!(
            "field `{}` is one-hot but got an id set",
            field.name
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::schema::FieldSource;

    fn fixture() -> (Tensor, FieldSpec) {
        let table = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 2.0, -0.5, 4.0]).unwrap();
        let spec = FieldSpec {
            name: "items".into(),
            source: FieldSource::BehaviorItems,
            vocab: 3,
            kind: FieldKind::MultiHot,
        };
        (table, spec)
    }

    #[test]
    fn one_hot_zero_row() {
        let (t, f) = fixture();
        assert_eq!(embed_field(&t, &f, FieldIds::OneHot(0)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn singleton_set_equals_one_hot() {
        let (t, f) = fixture();
        assert_eq!(
            embed_field(&t, &f, FieldIds::MultiHot(&[2])).unwrap(),
            embed_field(&t, &f, FieldIds::OneHot(2)).unwrap()
        );
    }

    #[test]
    fn multi_hot_sums_rows() {
        let (t, f) = fixture();
        assert_eq!(
            embed_field(&t, &f, FieldIds::MultiHot(&[1, 2])).unwrap(),
            vec![0.5, 6.0]
        );
    }

    #[test]
    fn out_of_vocabulary_is_an_error() {
        let (t, f) = fixture();
        assert!(matches!(
            embed_field(&t, &f, FieldIds::OneHot(3)),
            Err(Error::OutOfVocabulary { id: 3, vocab: 3, .. })
        ));
    }

    #[test]
    fn key_packing_round_trips() {
        let k = IdKey {
            field: 4,
            id: u32::MAX - 1,
        };
        assert_eq!(IdKey::unpack(k.pack()), k);
    }
}
