//! Central finite differences against the tape's analytic gradients.

use std::collections::BTreeMap;

use dicm::data::{ImageFeatureStore, Sample};
use dicm::model::{batch_loss, CtrModel, IdKey, InlineImages, TableRows, HEAD_STORE, IMAGE_STORE};
use dicm::numerics::{Graph, Tensor, Var};
use dicm::Result;

pub const STEP: f64 = 1e-5;
/// Second step for elementwise checks; a difference that straddles a
/// PReLU or max kink only disagrees at one of the two.
pub const FINE_STEP: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Worst relative error over every element of every input for a graph
/// built by `build` from input leaves.
pub fn check_op<'a>(inputs: &[Tensor], build: impl Fn(&mut Graph<'a>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    assert!(g.value(out).is_scalar(), "gradient checks need a scalar output");
    let back = g.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = back.get(*v).unwrap_or(&zeros);
        for j in 0..inputs[i].len() {
            let err = [STEP, FINE_STEP]
                .map(|h| {
                    let mut xs = inputs.to_vec();
                    xs[i].data_mut()[j] += h;
                    let up = eval(&xs);
                    xs[i].data_mut()[j] -= 2.0 * h;
                    let down = eval(&xs);
                    relative_error(analytic.data()[j], (up - down) / (2.0 * h))
                })
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(err);
        }
    }
    worst
}

fn loss_value(model: &CtrModel, batch: &[&Sample], store: &ImageFeatureStore) -> f64 {
    let mut g = Graph::new();
    let head_vars = model.head.params().bind(&mut g, HEAD_STORE);
    let image_vars = model.image.params.bind(&mut g, IMAGE_STORE);
    let mut rows = TableRows::new(&model.id_tables, false);
    let mut images = InlineImages::new(&model.image, &image_vars, &model.extractor, store);
    let loss = batch_loss(
        &mut g,
        &model.config,
        &model.head,
        &head_vars,
        batch,
        &mut rows,
        &mut images,
        batch.len(),
    )
    .unwrap()
    .expect("non-empty batch");
    g.value(loss).data()[0]
}

/// Analytic gradients of the mean batch loss: head tensors, image tensors
/// and touched ID rows.
pub struct ModelGrads {
    pub head: Vec<Tensor>,
    pub image: Vec<Tensor>,
    pub rows: BTreeMap<IdKey, Vec<f64>>,
}

pub fn analytic(model: &CtrModel, batch: &[&Sample], store: &ImageFeatureStore) -> ModelGrads {
    let mut g = Graph::new();
    let head_vars = model.head.params().bind(&mut g, HEAD_STORE);
    let image_vars = model.image.params.bind(&mut g, IMAGE_STORE);
    let mut rows = TableRows::new(&model.id_tables, true);
    let mut images = InlineImages::new(&model.image, &image_vars, &model.extractor, store);
    let loss = batch_loss(
        &mut g,
        &model.config,
        &model.head,
        &head_vars,
        batch,
        &mut rows,
        &mut images,
        batch.len(),
    )
    .unwrap()
    .expect("non-empty batch");
    let back = g.backward(loss).unwrap();
    let mut head = model.head.params().zero_grads();
    model.head.params().accumulate(&back, HEAD_STORE, &mut head).unwrap();
    let mut image = model.image.params.zero_grads();
    model.image.params.accumulate(&back, IMAGE_STORE, &mut image).unwrap();
    let id_dim = model.config.schema.id_dim;
    let rows = rows
        .vars
        .iter()
        .map(|(&k, &v)| {
            let d = back.get(v).map_or(vec![0.0; id_dim], |t| t.data().to_vec());
            (k, d)
        })
        .collect();
    ModelGrads { head, image, rows }
}

/// Per-group worst relative error of the end-to-end loss gradient:
/// `(head, image, id rows)`.
pub fn check_model(model: &CtrModel, batch: &[&Sample], store: &ImageFeatureStore) -> (f64, f64, f64) {
    let grads = analytic(model, batch, store);
    let central = |perturb: &dyn Fn(&mut CtrModel, f64)| {
        let mut m = model.clone();
        perturb(&mut m, STEP);
        let up = loss_value(&m, batch, store);
        perturb(&mut m, -2.0 * STEP);
        let down = loss_value(&m, batch, store);
        (up - down) / (2.0 * STEP)
    };

    let mut head = 0.0f64;
    for (t, gt) in grads.head.iter().enumerate() {
        for j in 0..gt.len() {
            let n = central(&|m, h| m.head.params_mut().tensors_mut()[t].data_mut()[j] += h);
            head = head.max(relative_error(gt.data()[j], n));
        }
    }
    let mut image = 0.0f64;
    for (t, gt) in grads.image.iter().enumerate() {
        for j in 0..gt.len() {
            let n = central(&|m, h| m.image.params.tensors_mut()[t].data_mut()[j] += h);
            image = image.max(relative_error(gt.data()[j], n));
        }
    }
    let mut rows = 0.0f64;
    for (key, d) in &grads.rows {
        for (j, &a) in d.iter().enumerate() {
            let n = central(&|m, h| {
                m.id_tables.tables[key.field as usize].row_mut(key.id as usize)[j] += h
            });
            rows = rows.max(relative_error(a, n));
        }
    }
    (head, image, rows)
}
