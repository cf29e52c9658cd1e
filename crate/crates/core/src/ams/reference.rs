use super::TrainState;
use crate::data::{ImageFeatureStore, Sample};
use crate::error::Result;
use crate::model::{batch_loss, InlineImages, TableRows, HEAD_STORE, IMAGE_STORE};
use crate::numerics::{Graph, Tensor};

/// Plain single-process trainer: one graph per batch with the image model
/// taped in-graph for every image occurrence, no messages and no caching.
#[derive(Clone, Debug)]
pub struct ReferenceTrainer {
    pub state: TrainState,
}

impl ReferenceTrainer {
    pub fn new(state: TrainState) -> Self {
        Self { state }
    }

    /// One step on `batch`; returns the mean loss before the update.
    pub fn step(&mut self, batch: &[&Sample], store: &ImageFeatureStore, lr: f64) -> Result<f64> {
        let st = &mut self.state;
        let model = &st.model;
        let mut g = Graph::new();
        let head_vars = model.head.params().bind(&mut g, HEAD_STORE);
        let image_vars = model.image.params.bind(&mut g, IMAGE_STORE);
        let mut rows = TableRows::new(&model.id_tables, true);
        let mut images = InlineImages::new(&model.image, &image_vars, &model.extractor, store);
        let Some(loss) = batch_loss(
            &mut g,
            &model.config,
            &model.head,
            &head_vars,
            batch,
            &mut rows,
            &mut images,
            batch.len(),
        )?
        else {
            return Ok(0.0);
        };
        let value = g.value(loss).data()[0];
        let back = g.backward(loss)?;

        let mut head_grads = model.head.params().zero_grads();
        model.head.params().accumulate(&back, HEAD_STORE, &mut head_grads)?;
        let mut image_grads = model.image.params.zero_grads();
        model.image.params.accumulate(&back, IMAGE_STORE, &mut image_grads)?;
        let row_grads: Vec<_> = rows
            .vars
            .iter()
            .map(|(&k, &v)| {
                let d = back.get(v).map_or_else(
                    || vec![0.0; model.config.schema.id_dim],
                    |t: &Tensor| t.data().to_vec(),
                );
                (k, d)
            })
            .collect();
        drop(g);

        let step = st.iteration + 1;
        let cfg = st.head_opt.config;
        st.head_opt
            .step(st.model.head.params_mut().tensors_mut(), &head_grads, lr)?;
        st.image_opt
            .step(st.model.image.params.tensors_mut(), &image_grads, lr)?;
        st.model.id_tables.apply_row_grads(
            row_grads.iter().map(|(k, d)| (*k, d.as_slice())),
            lr,
            step,
            &cfg,
        )?;
        st.iteration += 1;
        Ok(value)
    }
}
