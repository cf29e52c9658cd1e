//! The `dicm` command line: generate data, train, evaluate, account,
//! export and predict. Every command writes CSV reports and the resolved
//! configuration into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ams::{accounting, run_training, AccountingInput, Direction, Mode, NodeKind, TrafficMeter};
use crate::ams::{Category, IterationStats};
use crate::config::ExperimentConfig;
use crate::data::Sample;
use crate::deployment::{export_inference, Checkpoint, InferenceTable, Warmup};
use crate::error::{Error, Result};
use crate::experiment::{aggregator_sweep, evaluate, initial_state, load_model, Corpus, EvalReport, SweepRow};
use crate::model::{AggregatorKind, Prediction};

pub const METRICS_CSV: &str = "metrics.csv";
pub const TRAFFIC_CSV: &str = "traffic.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ACCOUNTING_CSV: &str = "accounting.csv";
pub const COMPRESSION_CSV: &str = "compression.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const DATA_CSV: &str = "data_summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dckp";
pub const EMBEDDINGS_FILE: &str = "embeddings.dmat";
pub const MODEL_FILE: &str = "model.dckp";

pub const METRICS_HEADER: &str = "iteration,loss,lr";
pub const TRAFFIC_HEADER: &str = "node_kind,category,direction,bytes";
pub const EVAL_HEADER: &str = "split,samples,auc,gauc,log_loss,clamped";
pub const SWEEP_HEADER: &str = "aggregator,samples,auc,gauc,log_loss";
pub const ACCOUNTING_HEADER: &str =
    "mode,worker_storage_bytes,server_storage_bytes,comm_all_bytes,comm_image_bytes";
pub const COMPRESSION_HEADER: &str = "raw_dim,image_dim,compression_ratio,id_param_bytes,batches";
pub const PREDICTIONS_HEADER: &str = "index,user,ad,logit,probability,label";
pub const DATA_HEADER: &str = "split,samples,clicks,ctr";

#[derive(Debug, Parser)]
#[command(name = "dicm", version, about = "Image-aware CTR training on an advanced model server")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(Common),
    /// Train on the simulated cluster; writes metrics, traffic and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to warm up from (see `--warmup`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// AUC, GAUC and log loss of a checkpoint, or an aggregator comparison.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "sweep")]
        checkpoint: Option<PathBuf>,
        /// Train and compare every aggregator instead of evaluating a checkpoint.
        #[arg(long)]
        sweep: bool,
    },
    /// Storage and traffic of the three image-placement strategies.
    Accounting {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Precompute image embeddings for serving.
    Export {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score the test split through the exported embedding table.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Embedding table from `export`; computed on the fly when absent.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

/// Flags shared by every command; each overrides its configuration key.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and parameter initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Image placement: store-in-worker, ps-store-in-server or ams.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Behavior aggregator: concat, max, sum, attn or multiquery-attn.
    #[arg(long, value_parser = parse_aggregator)]
    pub aggregator: Option<AggregatorKind>,
    /// Parameter groups restored from `--checkpoint`: non, partial or full.
    #[arg(long, value_parser = parse_warmup)]
    pub warmup: Option<Warmup>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_aggregator(s: &str) -> std::result::Result<AggregatorKind, String> {
    AggregatorKind::from_short_name(s).ok_or_else(|| {
        let names: Vec<_> = AggregatorKind::ALL.iter().map(|k| k.short_name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_warmup(s: &str) -> std::result::Result<Warmup, String> {
    Warmup::from_name(s).ok_or_else(|| "expected one of non, partial, full".to_string())
}

impl Common {
    /// The configuration file (or the defaults) with flag overrides applied.
    pub fn resolve(&self, init_checkpoint: Option<&Path>) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.data.seed = seed;
            c.model.seed = seed;
        }
        if let Some(out) = &self.out {
            c.output.dir = out.clone();
        }
        if let Some(m) = self.mode {
            c.cluster.mode = m;
        }
        if let Some(a) = self.aggregator {
            c.model.aggregator = a;
        }
        if let Some(w) = self.warmup {
            c.train.warmup = w;
        }
        if let Some(p) = init_checkpoint {
            c.train.init_checkpoint = Some(p.to_path_buf());
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => gen_data(&common.resolve(None)?),
        Command::Train {
            common,
            data,
            checkpoint,
        } => train(&common.resolve(checkpoint.as_deref())?, data.as_deref()),
        Command::Eval {
            common,
            data,
            checkpoint,
            sweep,
        } => {
            let config = common.resolve(None)?;
            if sweep {
                eval_sweep(&config, data.as_deref())
            } else {
                let ck = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
                eval(&config, data.as_deref(), &ck)
            }
        }
        Command::Accounting { common, data } => account(&common.resolve(None)?, data.as_deref()),
        Command::Export {
            common,
            data,
            checkpoint,
        } => export(&common.resolve(None)?, data.as_deref(), &checkpoint),
        Command::Predict {
            common,
            data,
            checkpoint,
            embeddings,
        } => predict(
            &common.resolve(None)?,
            data.as_deref(),
            &checkpoint,
            embeddings.as_deref(),
        ),
    }
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path> {
    config.write_resolved(&config.output.dir)?;
    Ok(&config.output.dir)
}

fn write_csv(path: &Path, header: &str, body: &str) -> Result<()> {
    std::fs::write(path, format!("{header}\n{body}")).map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn gen_data(config: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(config)?;
    let corpus = Corpus::generate(config)?;
    corpus.write(dir)?;
    let mut body = String::new();
    for (split, samples) in [("train", &corpus.train), ("test", &corpus.test)] {
        let clicks = samples.iter().filter(|s| s.label == 1).count();
        let ctr = clicks as f64 / samples.len().max(1) as f64;
        writeln!(body, "{split},{},{clicks},{ctr}", samples.len()).unwrap();
    }
    write_csv(&dir.join(DATA_CSV), DATA_HEADER, &body)
}

pub fn metrics_csv(iterations: &[IterationStats]) -> String {
    let mut body = String::new();
    for it in iterations {
        writeln!(body, "{},{},{}", it.iteration, it.loss, it.lr).unwrap();
    }
    body
}

pub fn traffic_csv(meter: &TrafficMeter) -> String {
    let mut body = String::new();
    for kind in [NodeKind::Worker, NodeKind::Server] {
        for cat in Category::ALL {
            for dir in [Direction::Sent, Direction::Received] {
                let kind_name = match kind {
                    NodeKind::Worker => "worker",
                    NodeKind::Server => "server",
                };
                let dir_name = match dir {
                    Direction::Sent => "sent",
                    Direction::Received => "received",
                };
                let bytes = meter.bytes(kind, cat, dir);
                writeln!(body, "{kind_name},{},{dir_name},{bytes}", cat.name()).unwrap();
            }
        }
    }
    body
}

pub fn train(config: &ExperimentConfig, data: Option<&Path>) -> Result<()> {
    let dir = out_dir(config)?;
    let corpus = Corpus::load_or_generate(config, data)?;
    let state = initial_state(config)?;
    let (state, report) = run_training(
        &config.cluster,
        state,
        &corpus.train,
        &corpus.images,
        &config.train.options(),
    )?;
    Checkpoint::capture(&state).save(&dir.join(CHECKPOINT_FILE))?;
    println!("wrote {}", dir.join(CHECKPOINT_FILE).display());
    write_csv(&dir.join(METRICS_CSV), METRICS_HEADER, &metrics_csv(&report.iterations))?;
    write_csv(&dir.join(TRAFFIC_CSV), TRAFFIC_HEADER, &traffic_csv(&report.meter))?;
    if let Some(last) = report.iterations.last() {
        println!("iterations {} final loss {:.6}", report.iterations.len(), last.loss);
    }
    Ok(())
}

fn eval_row(split: &str, r: &EvalReport) -> String {
    format!(
        "{split},{},{},{},{},{}\n",
        r.samples, r.auc, r.gauc, r.log_loss, r.clamped
    )
}

pub fn eval(config: &ExperimentConfig, data: Option<&Path>, checkpoint: &Path) -> Result<()> {
    let dir = out_dir(config)?;
    let corpus = Corpus::load_or_generate(config, data)?;
    let model = load_model(config, checkpoint)?;
    let mut body = String::new();
    for (split, samples) in [("train", &corpus.train), ("test", &corpus.test)] {
        let r = evaluate(&model, samples, &corpus.images)?;
        println!("{split}: auc {:.4} gauc {:.4} log loss {:.4}", r.auc, r.gauc, r.log_loss);
        body.push_str(&eval_row(split, &r));
    }
    write_csv(&dir.join(EVAL_CSV), EVAL_HEADER, &body)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut body = String::new();
    for r in rows {
        writeln!(
            body,
            "{},{},{},{},{}",
            r.aggregator.short_name(),
            r.report.samples,
            r.report.auc,
            r.report.gauc,
            r.report.log_loss
        )
        .unwrap();
    }
    body
}

pub fn eval_sweep(config: &ExperimentConfig, data: Option<&Path>) -> Result<()> {
    let dir = out_dir(config)?;
    let corpus = Corpus::load_or_generate(config, data)?;
    let rows = aggregator_sweep(config, &corpus, &AggregatorKind::ALL)?;
    for r in &rows {
        println!("{:>16}: auc {:.4} gauc {:.4}", r.aggregator.short_name(), r.report.auc, r.report.gauc);
    }
    write_csv(&dir.join(SWEEP_CSV), SWEEP_HEADER, &sweep_csv(&rows))
}

pub fn account(config: &ExperimentConfig, data: Option<&Path>) -> Result<()> {
    let dir = out_dir(config)?;
    let corpus = Corpus::load_or_generate(config, data)?;
    let schema = config.model_config().schema;
    let report = accounting(AccountingInput {
        schema: &schema,
        samples: &corpus.train,
        global_batch: config.cluster.global_batch(),
    });
    let mut body = String::new();
    for mode in Mode::ALL {
        let r = report.row(mode);
        writeln!(
            body,
            "{},{},{},{},{}",
            mode.name(),
            r.per_batch(r.worker_storage),
            r.per_batch(r.server_storage),
            r.per_batch(r.comm_all),
            r.per_batch(r.comm_image)
        )
        .unwrap();
    }
    write_csv(&dir.join(ACCOUNTING_CSV), ACCOUNTING_HEADER, &body)?;
    let ratio = format!(
        "{},{},{},{},{}\n",
        report.raw_dim,
        report.image_dim,
        report.compression_ratio(),
        report.id_param_bytes,
        report.batches.len()
    );
    println!("compression ratio {:.1}", report.compression_ratio());
    write_csv(&dir.join(COMPRESSION_CSV), COMPRESSION_HEADER, &ratio)
}

pub fn export(config: &ExperimentConfig, data: Option<&Path>, checkpoint: &Path) -> Result<()> {
    let dir = out_dir(config)?;
    let corpus = Corpus::load_or_generate(config, data)?;
    let model = load_model(config, checkpoint)?;
    let table = export_inference(&model, &corpus.images)?;
    table.write_embeddings(&dir.join(EMBEDDINGS_FILE))?;
    Checkpoint::load(checkpoint)?.save(&dir.join(MODEL_FILE))?;
    println!("exported {} image embeddings to {}", table.len(), dir.display());
    Ok(())
}

pub fn predictions_csv(samples: &[Sample], preds: &[Prediction]) -> String {
    let mut body = String::new();
    for (i, (s, p)) in samples.iter().zip(preds).enumerate() {
        writeln!(
            body,
            "{i},{},{},{},{},{}",
            s.user_id, s.ad_id, p.logit, p.probability, s.label
        )
        .unwrap();
    }
    body
}

pub fn predict(
    config: &ExperimentConfig,
    data: Option<&Path>,
    checkpoint: &Path,
    embeddings: Option<&Path>,
) -> Result<()> {
    let dir = out_dir(config)?;
    let corpus = Corpus::load_or_generate(config, data)?;
    let model = load_model(config, checkpoint)?;
    let table = match embeddings {
        Some(p) => InferenceTable::read_embeddings(model, p)?,
        None => export_inference(&model, &corpus.images)?,
    };
    let preds = corpus
        .test
        .iter()
        .map(|s| table.predict(s, Some(&corpus.images)))
        .collect::<Result<Vec<_>>>()?;
    write_csv(
        &dir.join(PREDICTIONS_CSV),
        PREDICTIONS_HEADER,
        &predictions_csv(&corpus.test, &preds),
    )
}
