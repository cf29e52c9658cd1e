use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dicm::cli::{
    ACCOUNTING_HEADER, COMPRESSION_HEADER, DATA_HEADER, EVAL_HEADER, METRICS_HEADER,
    PREDICTIONS_HEADER, SWEEP_HEADER, TRAFFIC_HEADER,
};
use dicm::config::{ExperimentConfig, RESOLVED_CONFIG};
use dicm::deployment::Checkpoint;

const TINY: &str = r#"
[data]
users = 40
items = 30
train_days = 2
impressions_per_user_day = 3
max_behaviors = 5
behaviors_max = 15

[model]
id_dim = 4
image_dim = 4
raw_dim = 16
mlp_hidden = [8, 4]
attention_hidden = 6
tower_hidden = 8
user_width = 4
ad_width = 4

[cluster]
workers = 2
servers = 2
batch_per_worker = 16

[train]
epochs = 1
"#;

fn dicm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dicm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = dicm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn lines(path: PathBuf) -> Vec<String> {
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["gen-data", "--config", "tiny.toml", "--out", "data"]);
    dir
}

#[test]
fn full_pipeline_writes_fixed_reports() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(lines(d.join("data/data_summary.csv"))[0], DATA_HEADER);
    for f in ["train.jsonl", "test.jsonl", "images.dmat", RESOLVED_CONFIG] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }

    ok(d, &["train", "--config", "tiny.toml", "--data", "data", "--out", "run"]);
    let metrics = lines(d.join("run/metrics.csv"));
    assert_eq!(metrics[0], METRICS_HEADER);
    // 2 days × 40 users × 3 impressions over a global batch of 32
    assert_eq!(metrics.len() - 1, 240usize.div_ceil(32));
    let traffic = lines(d.join("run/traffic.csv"));
    assert_eq!(traffic[0], TRAFFIC_HEADER);
    assert_eq!(traffic.len() - 1, 2 * 6 * 2);
    let ck = Checkpoint::load(&d.join("run/checkpoint.dckp")).unwrap();
    assert_eq!(ck.iteration, 8);

    ok(d, &["eval", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/checkpoint.dckp", "--out", "eval"]);
    let eval = lines(d.join("eval/eval.csv"));
    assert_eq!(eval[0], EVAL_HEADER);
    assert!(eval[1].starts_with("train,240,"));
    assert!(eval[2].starts_with("test,120,"));

    ok(d, &["accounting", "--config", "tiny.toml", "--data", "data", "--out", "acct"]);
    let acct = lines(d.join("acct/accounting.csv"));
    assert_eq!(acct[0], ACCOUNTING_HEADER);
    let modes: Vec<&str> = acct[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["store-in-worker", "ps-store-in-server", "ams"]);
    let comp = lines(d.join("acct/compression.csv"));
    assert_eq!(comp[0], COMPRESSION_HEADER);
    assert!(comp[1].starts_with("16,4,4,"));

    ok(d, &["export", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/checkpoint.dckp", "--out", "export"]);
    ok(d, &[
        "predict", "--config", "tiny.toml", "--data", "data", "--checkpoint", "export/model.dckp",
        "--embeddings", "export/embeddings.dmat", "--out", "pred",
    ]);
    let from_table = lines(d.join("pred/predictions.csv"));
    assert_eq!(from_table[0], PREDICTIONS_HEADER);
    assert_eq!(from_table.len() - 1, 120);
    ok(d, &["predict", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/checkpoint.dckp", "--out", "pred2"]);
    let live = lines(d.join("pred2/predictions.csv"));
    for (a, b) in from_table[1..].iter().zip(&live[1..]) {
        let la: f64 = a.split(',').nth(3).unwrap().parse().unwrap();
        let lb: f64 = b.split(',').nth(3).unwrap().parse().unwrap();
        // the exported table stores f32 embeddings
        assert!((la - lb).abs() < 1e-4, "{la} vs {lb}");
    }
}

#[test]
fn resolved_config_reflects_flags_and_reparses() {
    let dir = setup();
    let d = dir.path();
    ok(d, &[
        "train", "--config", "tiny.toml", "--data", "data", "--out", "run",
        "--seed", "11", "--aggregator", "sum",
    ]);
    let text = std::fs::read_to_string(d.join("run").join(RESOLVED_CONFIG)).unwrap();
    let c = ExperimentConfig::from_toml(&text, "resolved").unwrap();
    assert_eq!(c.model.seed, 11);
    assert_eq!(c.data.seed, 11);
    assert_eq!(c.model.aggregator, dicm::model::AggregatorKind::SumPooling);
    assert_eq!(c.output.dir, PathBuf::from("run"));
}

#[test]
fn partial_warmup_continues_from_checkpoint() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train", "--config", "tiny.toml", "--data", "data", "--out", "day1"]);
    ok(d, &[
        "train", "--config", "tiny.toml", "--data", "data", "--out", "day2",
        "--warmup", "partial", "--checkpoint", "day1/checkpoint.dckp",
    ]);
    let first = lines(d.join("day2/metrics.csv"));
    // iteration numbering carries over from the restored checkpoint
    assert!(first[1].starts_with("8,"), "{}", first[1]);
}

#[test]
fn sweep_lists_every_aggregator() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["eval", "--config", "tiny.toml", "--data", "data", "--sweep", "--out", "sweep"]);
    let rows = lines(d.join("sweep/sweep.csv"));
    assert_eq!(rows[0], SWEEP_HEADER);
    let names: Vec<&str> = rows[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["concat", "max", "sum", "attn", "multiquery-attn"]);
}

#[test]
fn errors_exit_nonzero_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[model]\nid_dim = 4\nwidth = 3\n").unwrap();
    let out = dicm(d, &["gen-data", "--config", "bad.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("model.width"), "{err}");

    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let out = dicm(d, &["train", "--config", "tiny.toml", "--mode", "store-in-worker"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("accounting-only"));

    let out = dicm(d, &["train", "--warmup", "partial"]);
    assert!(!out.status.success());

    let out = dicm(d, &["eval", "--config", "tiny.toml", "--checkpoint", "missing.dckp"]);
    assert!(!out.status.success());

    let out = dicm(d, &["train", "--mode", "nonsense"]);
    assert!(!out.status.success());
}
