mod common;

use common::grad::{check_model, check_op, relative_error, TOLERANCE};
use common::{tiny_data, tiny_model, tiny_model_config};
use dicm::data::Sample;
use dicm::model::{
    Aggregator, AggregatorKind, AggregatorSpec, CtrModel, ModelConfig, Normalization, ParamStore,
    IMAGE_STORE,
};
use dicm::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so PReLU and max stay off their kinks.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector(
        (0..n)
            .map(|i| {
                let m = rng.gen_range(0.2..1.0);
                if i % 2 == 0 { m } else { -m }
            })
            .collect(),
    )
}

/// Projects a vector output onto fixed weights to get a scalar loss.
fn project(g: &mut Graph<'_>, v: Var, seed: u64) -> Var {
    let n = g.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, &[n]));
    g.dot(v, w).unwrap()
}

type Build = fn(&mut Graph<'_>, &[Var]) -> dicm::Result<Var>;

fn data_config() -> dicm::data::SyntheticConfig {
    common::tiny_data_config(1)
}

fn assert_ok(name: &str, err: f64) {
    assert!(err < TOLERANCE, "{name}: relative error {err:e}");
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&mut rng, &[5]), random(&mut rng, &[3, 5]), random(&mut rng, &[3])];
    let err = check_op(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        Ok(project(g, y, 9))
    });
    assert_ok("linear", err);
}

#[test]
fn prelu_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [off_kink(&mut rng, 6), random(&mut rng, &[6])];
    let err = check_op(&inputs, |g, v| {
        let y = g.prelu(v[0], v[1])?;
        Ok(project(g, y, 3))
    });
    assert_ok("prelu", err);
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[4])).collect();
    let cases: [(&str, Build); 7] = [
        ("add", |g, v| g.add(v[0], v[1])),
        ("sum", |g, v| g.sum(v)),
        ("concat", |g, v| Ok(g.concat(v))),
        ("scale", |g, v| Ok(g.scale(v[2], -1.7))),
        ("reduce_sum", |g, v| {
            let p = g.add(v[0], v[1])?;
            let s = g.reduce_sum(p);
            let sq = g.dot(s, s)?;
            Ok(sq)
        }),
        ("dot", |g, v| g.dot(v[0], v[1])),
        ("stack", |g, v| {
            let a = g.dot(v[0], v[1])?;
            let b = g.dot(v[1], v[2])?;
            g.stack(&[a, b])
        }),
    ];
    for (name, build) in cases {
        let err = check_op(&inputs, |g, v| {
            let y = build(g, v)?;
            Ok(if g.value(y).is_scalar() { y } else { project(g, y, 5) })
        });
        assert_ok(name, err);
    }
}

#[test]
fn elementwise_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // distinct values per coordinate, so the argmax is unique
    let inputs: Vec<Tensor> = [0.0, -0.5, 1.0]
        .iter()
        .map(|offset| {
            let base = random(&mut rng, &[5]);
            Tensor::vector(base.data().iter().map(|x| 0.1 * x + offset).collect())
        })
        .collect();
    let err = check_op(&inputs, |g, v| {
        let y = g.max(v)?;
        Ok(project(g, y, 6))
    });
    assert_ok("max", err);
}

#[test]
fn softmax_and_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        random(&mut rng, &[3]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
    ];
    let err = check_op(&inputs, |g, v| {
        let w = g.softmax(v[0])?;
        let y = g.weighted_sum(w, &v[1..])?;
        Ok(project(g, y, 7))
    });
    assert_ok("softmax + weighted sum", err);
    let err = check_op(&inputs, |g, v| {
        let y = g.weighted_sum(v[0], &v[1..])?;
        Ok(project(g, y, 8))
    });
    assert_ok("raw weighted sum", err);
}

#[test]
fn sigmoid_cross_entropy_both_labels() {
    for label in [0.0, 1.0] {
        for z in [-4.0, -0.3, 0.0, 2.5] {
            let err = check_op(&[Tensor::scalar(z)], |g, v| g.sigmoid_xent(v[0], label));
            assert_ok("sigmoid xent", err);
        }
    }
}

#[test]
fn image_embedding_model_taped_and_cached() {
    let data = tiny_data(1);
    let model = tiny_model(&data_config(), AggregatorKind::SumPooling, 3);
    let raw = model.extractor.extract(&data.images, 0).unwrap();
    // gradient with respect to the raw input through the taped net
    let err = check_op(&[Tensor::vector(raw.clone())], |g, v| {
        let vars = model.image.params.bind(g, IMAGE_STORE);
        let e = model.image.forward_graph(g, &vars, v[0])?;
        Ok(project(g, e, 11))
    });
    assert_ok("image model input", err);

    // the untaped backward matches the tape's parameter gradient
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let delta = random(&mut rng, &[model.image.output_dim()]);
    let mut g = Graph::new();
    let vars = model.image.params.bind(&mut g, IMAGE_STORE);
    let x = g.constant(Tensor::vector(raw.clone()));
    let e = model.image.forward_graph(&mut g, &vars, x).unwrap();
    let d = g.constant(delta.clone());
    let loss = g.dot(e, d).unwrap();
    let back = g.backward(loss).unwrap();
    let mut taped = model.image.params.zero_grads();
    model.image.params.accumulate(&back, IMAGE_STORE, &mut taped).unwrap();
    let (_, acts) = model.image.forward_cached(&raw).unwrap();
    let mut cached = model.image.params.zero_grads();
    model.image.backward_cached(&acts, delta.data(), &mut cached);
    for (a, b) in taped.iter().zip(&cached) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(relative_error(*x, *y) < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn aggregator_inputs_every_kind() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in AggregatorKind::ALL {
        for normalization in [Normalization::Softmax, Normalization::Raw] {
            let spec = AggregatorSpec {
                kind,
                attention_hidden: 5,
                normalization,
            };
            let mut store = ParamStore::new();
            let agg = Aggregator::new(&spec, d, 3, 6, &mut store, &mut rng).unwrap();
            let mut inputs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[d])).collect();
            inputs.push(random(&mut rng, &[6]));
            let err = check_op(&inputs, |g, v| {
                let vars = store.bind(g, 7);
                let y = agg.apply(g, &vars, &v[..3], Some(v[3]), Some(v[4]))?;
                Ok(project(g, y, 13))
            });
            assert_ok(&format!("{kind:?} {normalization:?}"), err);
        }
    }
}

fn batch(data: &dicm::data::Dataset) -> Vec<&Sample> {
    // mixed labels and varied behavior lengths
    data.train.iter().step_by(7).take(4).collect()
}

#[test]
fn end_to_end_dicm_every_aggregator() {
    let data = tiny_data(2);
    let b = batch(&data);
    for kind in AggregatorKind::ALL {
        let model = tiny_model(&data_config(), kind, 5);
        let (head, image, rows) = check_model(&model, &b, &data.images);
        assert_ok(&format!("{kind:?} head"), head);
        assert_ok(&format!("{kind:?} image model"), image);
        assert_ok(&format!("{kind:?} id rows"), rows);
    }
}

#[test]
fn end_to_end_raw_attention_weights() {
    let data = tiny_data(3);
    let mut config = tiny_model_config(&data_config(), AggregatorKind::MultiQueryAttentivePooling);
    if let dicm::model::Architecture::Dicm { aggregator, .. } = &mut config.architecture {
        aggregator.normalization = Normalization::Raw;
    }
    let model = CtrModel::new(config, 8).unwrap();
    let (head, image, rows) = check_model(&model, &batch(&data), &data.images);
    assert_ok("head", head);
    assert_ok("image", image);
    assert_ok("rows", rows);
}

#[test]
fn end_to_end_two_tower() {
    let data = tiny_data(4);
    let base = tiny_model_config(&data_config(), AggregatorKind::SumPooling);
    let config = ModelConfig {
        architecture: dicm::model::Architecture::TwoTower {
            tower_hidden: 6,
            user_width: 4,
            ad_width: 4,
        },
        ..base
    };
    let model = CtrModel::new(config, 9).unwrap();
    let (head, image, rows) = check_model(&model, &batch(&data), &data.images);
    assert_ok("head", head);
    assert_ok("image", image);
    assert_ok("rows", rows);
}
