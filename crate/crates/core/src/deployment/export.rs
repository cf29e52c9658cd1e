use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{ImageFeatureStore, Matrix32, Sample};
use crate::error::{Error, Result};
use crate::model::{CtrModel, ImageSource, Prediction, TableRows, HEAD_STORE};
use crate::numerics::{Graph, Tensor, Var};

/// Precomputed image embeddings next to the frozen model.
///
/// Prediction reads embeddings from the table; an image missing from it is
/// embedded on the fly from the image store (the cold path).
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTable {
    pub model: CtrModel,
    embeddings: BTreeMap<u32, Vec<f64>>,
}

/// Embeds every image of `store` with the trained image model.
pub fn export_inference(model: &CtrModel, store: &ImageFeatureStore) -> Result<InferenceTable> {
    let mut embeddings = BTreeMap::new();
    for id in 0..store.len() as u32 {
        embeddings.insert(id, model.embed_image(store, id)?);
    }
    Ok(InferenceTable {
        model: model.clone(),
        embeddings,
    })
}

impl InferenceTable {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embedding(&self, image: u32) -> Option<&[f64]> {
        self.embeddings.get(&image).map(Vec::as_slice)
    }

    /// Drops images from the table, e.g. to model ones uploaded after export.
    pub fn forget(&mut self, images: impl IntoIterator<Item = u32>) {
        for i in images {
            self.embeddings.remove(&i);
        }
    }

    /// Images of `sample` that are not in the table.
    pub fn cold_images(&self, sample: &Sample) -> Vec<u32> {
        self.model
            .required_images(sample)
            .into_iter()
            .filter(|i| !self.embeddings.contains_key(i))
            .collect()
    }

    /// Scores a sample from table lookups; `store` serves the cold path.
    pub fn predict(&self, sample: &Sample, store: Option<&ImageFeatureStore>) -> Result<Prediction> {
        let model = &self.model;
        let mut g = Graph::new();
        let head_vars = model.head.params().bind(&mut g, HEAD_STORE);
        let mut rows = TableRows::new(&model.id_tables, false);
        let mut images = KvImages {
            table: self,
            store,
            vars: BTreeMap::new(),
        };
        let sv = model.sample_vars(&mut g, sample, &mut rows, &mut images)?;
        let logit = model.head.logit(&mut g, &head_vars, &sv)?;
        Ok(Prediction::from_logit(g.value(logit).data()[0]))
    }

    /// Writes `embeddings.dmat` (one `f32` row per image id, ids dense from 0).
    pub fn write_embeddings(&self, path: &Path) -> Result<()> {
        let cols = self.model.config.schema.image_dim;
        let rows = self.embeddings.len();
        if self.embeddings.keys().enumerate().any(|(i, &k)| k as usize != i) {
            return Err(Error::Contract(
                "only a table with dense image ids can be written".into(),
            ));
        }
        let data = self
            .embeddings
            .values()
            .flat_map(|e| e.iter().map(|&x| x as f32))
            .collect();
        Matrix32 { rows, cols, data }.write(path)
    }

    /// Rebuilds a table from a model and an embeddings file written by
    /// [`Self::write_embeddings`]. Values carry the file's `f32` precision.
    pub fn read_embeddings(model: CtrModel, path: &Path) -> Result<Self> {
        let m = Matrix32::read(path)?;
        if m.cols != model.config.schema.image_dim {
            return Err(Error::Dimension {
                op: "inference table",
                left: vec![model.config.schema.image_dim],
                right: vec![m.cols],
            });
        }
        let embeddings = m
            .data
            .chunks_exact(m.cols.max(1))
            .enumerate()
            .map(|(i, row)| (i as u32, row.iter().map(|&x| f64::from(x)).collect()))
            .collect();
        Ok(Self { model, embeddings })
    }
}

struct KvImages<'a> {
    table: &'a InferenceTable,
    store: Option<&'a ImageFeatureStore>,
    vars: BTreeMap<u32, Var>,
}

impl<'p> ImageSource<'p> for KvImages<'_> {
    fn image(&mut self, g: &mut Graph<'p>, image: u32) -> Result<Var> {
        if let Some(&v) = self.vars.get(&image) {
            return Ok(v);
        }
        let e = match self.table.embeddings.get(&image) {
            Some(e) => e.clone(),
            None => {
                let store = self.store.ok_or(Error::UnknownImage(u64::from(image)))?;
                self.table.model.embed_image(store, image)?
            }
        };
        let v = g.constant(Tensor::vector(e));
        self.vars.insert(image, v);
        Ok(v)
    }
}
