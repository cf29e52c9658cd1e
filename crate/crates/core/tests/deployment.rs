mod common;

use common::{tiny_data, tiny_data_config, tiny_model, tiny_model_config};
use dicm::ams::{run_training, ClusterConfig, TrainOptions, TrainState};
use dicm::deployment::{export_inference, load_warmup, Checkpoint, InferenceTable, Warmup, WarmupMask};
use dicm::model::{AggregatorKind, CtrModel, ParamGroup};
use dicm::numerics::AdamConfig;
use dicm::Error;

fn trained(seed: u64) -> (TrainState, dicm::data::Dataset) {
    let cfg = tiny_data_config(seed);
    let data = tiny_data(seed);
    let state = TrainState::new(
        tiny_model(&cfg, AggregatorKind::AttentivePooling, seed),
        AdamConfig::default(),
    );
    let cluster = ClusterConfig {
        workers: 2,
        servers: 2,
        batch_per_worker: 8,
        ..ClusterConfig::default()
    };
    let opts = TrainOptions {
        epochs: 2,
        ..TrainOptions::default()
    };
    let (state, _) = run_training(&cluster, state, &data.train, &data.images, &opts).unwrap();
    (state, data)
}

#[test]
fn save_load_save_is_byte_identical() {
    let (state, _) = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ck = Checkpoint::capture(&state);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn header_checksum_covers_the_body() {
    let (state, _) = trained(2);
    let bytes = Checkpoint::capture(&state).to_bytes();
    let recorded = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
    assert_eq!(recorded, crc32fast::hash(&bytes[24..]));
    let mut corrupt = bytes.clone();
    let last = corrupt.len() - 1;
    corrupt[last] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Format { .. })));
}

#[test]
fn mismatched_schema_names_the_group() {
    let (state, _) = trained(3);
    let ck = Checkpoint::capture(&state);
    let mut config = state.model.config.clone();
    config.schema.id_dim += 1;
    let err = load_warmup(&ck, &config, Warmup::Full.mask(), 0, AdamConfig::default()).unwrap_err();
    match err {
        Error::GroupMismatch { group, .. } => assert_eq!(group, "id-embeddings"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_group_is_reported() {
    let (state, _) = trained(4);
    let mut ck = Checkpoint::capture(&state);
    ck.groups.retain(|g| g.name != "mlp");
    let err = load_warmup(&ck, &state.model.config, Warmup::Partial.mask(), 0, AdamConfig::default())
        .unwrap_err();
    assert!(matches!(err, Error::MissingGroup(g) if g == "mlp"));
}

#[test]
fn warmup_masks_restore_exactly_what_they_name() {
    let (state, _) = trained(5);
    let ck = Checkpoint::capture(&state);
    let config = &state.model.config;
    let adam = AdamConfig::default();

    let full = load_warmup(&ck, config, Warmup::Full.mask(), 99, adam).unwrap();
    assert_eq!(full, state);

    let partial = load_warmup(&ck, config, Warmup::Partial.mask(), 99, adam).unwrap();
    assert!(partial.model.head.params().bit_eq(state.model.head.params()));
    assert!(partial.model.image.params.bit_eq(&state.model.image.params));
    assert_eq!(partial.head_opt, state.head_opt);
    let fresh = CtrModel::new(config.clone(), 99).unwrap();
    assert_eq!(partial.model.id_tables.tables, fresh.id_tables.tables);
    let shared = partial
        .model
        .id_tables
        .tables
        .iter()
        .zip(&state.model.id_tables.tables)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()))
        .filter(|(x, y)| x.to_bits() == y.to_bits())
        .count();
    assert_eq!(shared, 0);
    assert!(partial.model.id_tables.m.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));

    let non = load_warmup(&ck, config, Warmup::Non.mask(), 99, adam).unwrap();
    assert_eq!(non, TrainState::new(fresh, adam));
}

#[test]
fn custom_mask_can_keep_only_the_image_model() {
    let (state, _) = trained(6);
    let ck = Checkpoint::capture(&state);
    let mask = WarmupMask::new(&[ParamGroup::ImageModel]);
    let s = load_warmup(&ck, &state.model.config, mask, 3, AdamConfig::default()).unwrap();
    assert!(s.model.image.params.bit_eq(&state.model.image.params));
    assert!(!s.model.head.params().bit_eq(state.model.head.params()));
}

#[test]
fn key_value_predictor_matches_full_model() {
    let (state, data) = trained(7);
    let table = export_inference(&state.model, &data.images).unwrap();
    for id in 0..data.images.len() as u32 {
        let live = state.model.embed_image(&data.images, id).unwrap();
        assert_eq!(table.embedding(id).unwrap(), live.as_slice());
    }
    for s in data.test.iter().chain(&data.train) {
        let kv = table.predict(s, None).unwrap();
        let full = state.model.forward_ctr(s, &data.images).unwrap();
        assert!((kv.logit - full.logit).abs() <= 1e-12);
    }
}

#[test]
fn cold_images_are_embedded_on_the_fly() {
    let (state, data) = trained(8);
    let mut table = export_inference(&state.model, &data.images).unwrap();
    let s = &data.test[0];
    table.forget([s.ad_image]);
    assert_eq!(table.cold_images(s), vec![s.ad_image]);
    assert!(matches!(table.predict(s, None), Err(Error::UnknownImage(_))));
    let p = table.predict(s, Some(&data.images)).unwrap();
    assert!(p.probability > 0.0 && p.probability < 1.0);
    let full = state.model.forward_ctr(s, &data.images).unwrap();
    assert!((p.logit - full.logit).abs() <= 1e-12);
}

#[test]
fn exported_embeddings_roundtrip_at_f32_precision() {
    let (state, data) = trained(9);
    let table = export_inference(&state.model, &data.images).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("embeddings.dmat");
    table.write_embeddings(&path).unwrap();
    let back = InferenceTable::read_embeddings(state.model.clone(), &path).unwrap();
    assert_eq!(back.len(), table.len());
    for id in 0..table.len() as u32 {
        for (a, b) in back.embedding(id).unwrap().iter().zip(table.embedding(id).unwrap()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }
}

#[test]
fn two_tower_checkpoint_roundtrips() {
    let cfg = tiny_data_config(1);
    let mut mc = tiny_model_config(&cfg, AggregatorKind::SumPooling);
    mc.architecture = dicm::model::Architecture::TwoTower {
        tower_hidden: 8,
        user_width: 6,
        ad_width: 6,
    };
    let state = TrainState::new(CtrModel::new(mc.clone(), 1).unwrap(), AdamConfig::default());
    let ck = Checkpoint::capture(&state);
    let back = load_warmup(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), &mc, Warmup::Full.mask(), 5, AdamConfig::default()).unwrap();
    assert_eq!(back, state);
}
