//! Train-and-evaluate helpers shared by the CLI and the benchmarks.

use std::path::Path;

use serde::Serialize;

use crate::ams::{run_training, ClusterConfig, TrainOptions, TrainReport, TrainState};
use crate::config::ExperimentConfig;
use crate::data::{generate, read_samples, write_samples, ImageFeatureStore, Matrix32, Sample};
use crate::deployment::{export_inference, load_warmup, Checkpoint, Warmup};
use crate::error::{Error, Result};
use crate::metrics::{auc, gauc, log_loss, ScoredImpression};
use crate::model::{AggregatorKind, CtrModel, ModelConfig, Prediction};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const IMAGES_FILE: &str = "images.dmat";

/// Train and test impressions with the image store they reference.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub images: ImageFeatureStore,
}

impl Corpus {
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        let d = generate(&config.data)?;
        Ok(Self {
            train: d.train,
            test: d.test,
            images: d.images,
        })
    }

    /// Writes `train.jsonl`, `test.jsonl` and `images.dmat` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_samples(&dir.join(TRAIN_FILE), &self.train)?;
        write_samples(&dir.join(TEST_FILE), &self.test)?;
        self.images.matrix().write(&dir.join(IMAGES_FILE))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: read_samples(&dir.join(TRAIN_FILE))?,
            test: read_samples(&dir.join(TEST_FILE))?,
            images: ImageFeatureStore::from_matrix(Matrix32::read(&dir.join(IMAGES_FILE))?),
        })
    }

    /// Reads `dir` when given, otherwise generates from the configuration.
    pub fn load_or_generate(config: &ExperimentConfig, dir: Option<&Path>) -> Result<Self> {
        match dir {
            Some(d) => Self::read(d),
            None => Self::generate(config),
        }
    }
}

/// The starting state of a run: fresh, or warmed up from
/// `train.init_checkpoint` according to `train.warmup`.
pub fn initial_state(config: &ExperimentConfig) -> Result<TrainState> {
    let model = config.model_config();
    let adam = config.train.options().adam;
    match (config.train.warmup, &config.train.init_checkpoint) {
        (Warmup::Non, _) => Ok(TrainState::new(CtrModel::new(model, config.model.seed)?, adam)),
        (w, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            load_warmup(&ck, &model, w.mask(), config.model.seed, adam)
        }
        (w, None) => Err(Error::Config(format!(
            "warm-up `{w}` needs train.init_checkpoint"
        ))),
    }
}

/// Loads a trained model: every group from `checkpoint`.
pub fn load_model(config: &ExperimentConfig, checkpoint: &Path) -> Result<CtrModel> {
    let ck = Checkpoint::load(checkpoint)?;
    let state = load_warmup(
        &ck,
        &config.model_config(),
        Warmup::Full.mask(),
        config.model.seed,
        config.train.options().adam,
    )?;
    Ok(state.model)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub auc: f64,
    pub gauc: f64,
    pub log_loss: f64,
    /// Probabilities clamped away from 0 or 1 before taking logs.
    pub clamped: usize,
}

/// Scores samples through precomputed image embeddings.
pub fn predict_all(
    model: &CtrModel,
    samples: &[Sample],
    store: &ImageFeatureStore,
) -> Result<Vec<Prediction>> {
    let table = export_inference(model, store)?;
    samples.iter().map(|s| table.predict(s, Some(store))).collect()
}

pub fn evaluate(model: &CtrModel, samples: &[Sample], store: &ImageFeatureStore) -> Result<EvalReport> {
    let preds = predict_all(model, samples, store)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.logit).collect();
    let probs: Vec<f64> = preds.iter().map(|p| p.probability).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let impressions: Vec<ScoredImpression> = samples
        .iter()
        .zip(&scores)
        .map(|(s, &score)| ScoredImpression {
            user: s.user_id,
            score,
            label: s.label,
        })
        .collect();
    let ll = log_loss(&probs, &labels)?;
    Ok(EvalReport {
        samples: samples.len(),
        auc: auc(&scores, &labels)?,
        gauc: gauc(&impressions)?,
        log_loss: ll.value,
        clamped: ll.clamped,
    })
}

/// Fresh model from `config` and `seed`, trained on the AMS cluster.
pub fn train_fresh(
    config: &ModelConfig,
    seed: u64,
    train: &[Sample],
    store: &ImageFeatureStore,
    cluster: &ClusterConfig,
    options: &TrainOptions,
) -> Result<(TrainState, TrainReport)> {
    let state = TrainState::new(CtrModel::new(config.clone(), seed)?, options.adam);
    run_training(cluster, state, train, store, options)
}

/// One row of an aggregator comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub aggregator: AggregatorKind,
    pub report: EvalReport,
}

/// Trains one fresh DICM per aggregator on the same data and seed and
/// evaluates each on the test split.
pub fn aggregator_sweep(
    config: &ExperimentConfig,
    corpus: &Corpus,
    kinds: &[AggregatorKind],
) -> Result<Vec<SweepRow>> {
    kinds
        .iter()
        .map(|&kind| {
            let mut c = config.clone();
            c.model.aggregator = kind;
            let (state, _) = train_fresh(
                &c.model_config(),
                c.model.seed,
                &corpus.train,
                &corpus.images,
                &c.cluster,
                &c.train.options(),
            )?;
            Ok(SweepRow {
                aggregator: kind,
                report: evaluate(&state.model, &corpus.test, &corpus.images)?,
            })
        })
        .collect()
}
