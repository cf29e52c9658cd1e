use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dicm::ams::{accounting, AccountingInput, Mode};
use dicm::config::ExperimentConfig;
use dicm::deployment::Checkpoint;
use dicm::experiment::{initial_state, predict_all, Corpus};
use dicm::metrics::{self, ScoredImpression};
use dicm_ffi::*;

const TINY: &str = r#"
[data]
users = 30
items = 25
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

[cluster]
workers = 2
servers = 2
batch_per_worker = 16
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
    data: PathBuf,
    corpus: Corpus,
    parsed: ExperimentConfig,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let parsed = ExperimentConfig::load(&config).unwrap();
    let data = dir.path().join("data");
    let corpus = Corpus::generate(&parsed).unwrap();
    corpus.write(&data).unwrap();
    let state = initial_state(&parsed).unwrap();
    let checkpoint = dir.path().join("model.dckp");
    Checkpoint::capture(&state).save(&checkpoint).unwrap();
    Fixture {
        _dir: dir,
        config,
        checkpoint,
        data,
        corpus,
        parsed,
    }
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = dicm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn open(f: &Fixture) -> *mut DicmModel {
    let mut model = ptr::null_mut();
    let status = unsafe {
        dicm_model_open(c(&f.config).as_ptr(), c(&f.checkpoint).as_ptr(), c(&f.data).as_ptr(), &mut model)
    };
    assert_eq!(status, DicmStatus::Ok);
    model
}

#[test]
fn predictions_match_the_library() {
    let f = fixture();
    let model = open(&f);
    let mut count = 0;
    assert_eq!(unsafe { dicm_model_image_count(model, &mut count) }, DicmStatus::Ok);
    assert_eq!(count, f.corpus.images.len());

    let live = predict_all(
        &dicm::experiment::load_model(&f.parsed, &f.checkpoint).unwrap(),
        &f.corpus.test,
        &f.corpus.images,
    )
    .unwrap();
    let c_samples: Vec<DicmSample> = f
        .corpus
        .test
        .iter()
        .map(|s| DicmSample {
            user_id: s.user_id,
            scenario_id: s.scenario_id,
            ad_id: s.ad_id,
            category_id: s.category_id,
            ad_image: s.ad_image,
            behavior_items: s.behavior_items.as_ptr(),
            behavior_images: s.behavior_images.as_ptr(),
            behavior_len: s.behavior_items.len(),
        })
        .collect();
    let mut batch = vec![DicmPrediction::default(); c_samples.len()];
    let status = unsafe { dicm_model_predict_batch(model, c_samples.as_ptr(), c_samples.len(), batch.as_mut_ptr()) };
    assert_eq!(status, DicmStatus::Ok);
    for ((cs, b), want) in c_samples.iter().zip(&batch).zip(&live) {
        let mut one = DicmPrediction::default();
        assert_eq!(unsafe { dicm_model_predict(model, cs, &mut one) }, DicmStatus::Ok);
        assert_eq!(one, *b);
        assert_eq!(one.logit, want.logit);
        assert_eq!(one.probability, want.probability);
    }
    unsafe { dicm_model_free(model) };
}

#[test]
fn bad_inputs_report_codes_and_messages() {
    let f = fixture();
    let model = open(&f);

    let mut sample = DicmSample {
        user_id: 0,
        scenario_id: 0,
        ad_id: 0,
        category_id: 0,
        ad_image: 1_000_000,
        behavior_items: ptr::null(),
        behavior_images: ptr::null(),
        behavior_len: 0,
    };
    let mut out = DicmPrediction::default();
    assert_eq!(unsafe { dicm_model_predict(model, &sample, &mut out) }, DicmStatus::UnknownImage);
    assert!(last_error().contains("1000000"));
    assert_eq!(out, DicmPrediction::default());

    sample.ad_image = 0;
    sample.user_id = 99_999;
    assert_eq!(unsafe { dicm_model_predict(model, &sample, &mut out) }, DicmStatus::OutOfVocabulary);

    sample.user_id = 0;
    sample.behavior_len = 2;
    assert_eq!(unsafe { dicm_model_predict(model, &sample, &mut out) }, DicmStatus::NullPointer);
    assert!(last_error().contains("behavior_items"));
    assert_eq!(unsafe { dicm_model_predict(ptr::null(), &sample, &mut out) }, DicmStatus::NullPointer);
    unsafe { dicm_model_free(model) };
    unsafe { dicm_model_free(ptr::null_mut()) };

    let mut handle = ptr::null_mut();
    let missing = c(&f.data.join("missing.dckp"));
    let status = unsafe { dicm_model_open(c(&f.config).as_ptr(), missing.as_ptr(), c(&f.data).as_ptr(), &mut handle) };
    assert_eq!(status, DicmStatus::Io);
    assert!(last_error().contains("missing.dckp"));
    assert!(handle.is_null());

    let bad = f.data.join("bad.toml");
    std::fs::write(&bad, "[model]\nid_dim = 4\nwidth = 3\n").unwrap();
    let status = unsafe { dicm_model_open(c(&bad).as_ptr(), c(&f.checkpoint).as_ptr(), c(&f.data).as_ptr(), &mut handle) };
    assert_eq!(status, DicmStatus::Config);
    assert!(last_error().contains("line 3"));

    dicm_clear_last_error();
    assert!(dicm_last_error_message().is_null());
}

#[test]
fn errors_are_per_thread() {
    let mut out = 0.0;
    let labels = [1u8, 1];
    let scores = [0.2, 0.4];
    assert_eq!(unsafe { dicm_auc(scores.as_ptr(), labels.as_ptr(), 2, &mut out) }, DicmStatus::Undefined);
    std::thread::spawn(|| assert!(dicm_last_error_message().is_null())).join().unwrap();
    assert!(last_error().contains("AUC"));
}

#[test]
fn metrics_match_the_library() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut a = 0.0;
    assert_eq!(unsafe { dicm_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut a) }, DicmStatus::Ok);
    assert_eq!(a, 0.75);

    let users = [0u32, 0, 1, 1, 1, 1, 1, 1];
    let scores = [0.9, 0.1, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
    let labels = [1u8, 0, 0, 1, 0, 1, 0, 1];
    let mut g = 0.0;
    assert_eq!(
        unsafe { dicm_gauc(users.as_ptr(), scores.as_ptr(), labels.as_ptr(), 8, &mut g) },
        DicmStatus::Ok
    );
    assert_eq!(g, 0.625);
    let imps: Vec<ScoredImpression> = (0..8)
        .map(|i| ScoredImpression { user: users[i], score: scores[i], label: labels[i] })
        .collect();
    assert_eq!(g, metrics::gauc(&imps).unwrap());

    let probs = [0.0, 0.3, 0.9, 1.0];
    let labels = [0u8, 1, 1, 0];
    let (mut l, mut clamped) = (0.0, 0usize);
    assert_eq!(
        unsafe { dicm_log_loss(probs.as_ptr(), labels.as_ptr(), 4, &mut l, &mut clamped) },
        DicmStatus::Ok
    );
    let want = metrics::log_loss(&probs, &labels).unwrap();
    assert_eq!((l, clamped), (want.value, want.clamped));
    assert_eq!(clamped, 2);
    assert_eq!(
        unsafe { dicm_log_loss(probs.as_ptr(), labels.as_ptr(), 4, &mut l, ptr::null_mut()) },
        DicmStatus::Ok
    );

    let mut r = 0.0;
    assert_eq!(unsafe { dicm_compression_ratio(4096, 12, &mut r) }, DicmStatus::Ok);
    assert_eq!(r, 4096.0 / 12.0);
    assert_eq!(unsafe { dicm_compression_ratio(4096, 0, &mut r) }, DicmStatus::InvalidArgument);
}

#[test]
fn accounting_matches_the_library() {
    let f = fixture();
    let mut out = DicmAccounting::default();
    let status = unsafe { dicm_accounting(c(&f.config).as_ptr(), c(&f.data).as_ptr(), &mut out) };
    assert_eq!(status, DicmStatus::Ok);
    let schema = f.parsed.model_config().schema;
    let report = accounting(AccountingInput {
        schema: &schema,
        samples: &f.corpus.train,
        global_batch: f.parsed.cluster.global_batch(),
    });
    assert_eq!(out.compression_ratio, 4.0);
    assert_eq!(out.batches, report.batches.len());
    assert_eq!(out.id_param_bytes, report.id_param_bytes);
    for (i, mode) in Mode::ALL.into_iter().enumerate() {
        let r = report.row(mode);
        assert_eq!(out.rows[i].mode, i as u32);
        assert_eq!(out.rows[i].comm_image, r.per_batch(r.comm_image));
        assert_eq!(out.rows[i].worker_storage, r.per_batch(r.worker_storage));
    }
    assert!(out.rows[2].comm_image < out.rows[1].comm_image);
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "dicm.h"

int main(void) {
    double scores[4] = {0.1, 0.4, 0.35, 0.8};
    uint8_t labels[4] = {0, 0, 1, 1};
    double auc = 0.0;
    if (dicm_auc(scores, labels, 4, &auc) != DICM_STATUS_OK || auc != 0.75) return 1;
    uint8_t same[2] = {1, 1};
    if (dicm_auc(scores, same, 2, &auc) != DICM_STATUS_UNDEFINED) return 2;
    const char *msg = dicm_last_error_message();
    if (msg == NULL || strstr(msg, "AUC") == NULL) return 3;
    DicmModel *model = NULL;
    if (dicm_model_open("nope.toml", "nope.dckp", ".", &model) != DICM_STATUS_IO) return 4;
    if (model != NULL) return 5;
    dicm_model_free(NULL);
    printf("ok\n");
    return 0;
}
"#;

/// Compiles a C program against the generated header and static library.
#[test]
fn c_program_links_against_the_header() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    // tests run from target/<profile>/deps; the static library sits one level up
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    assert!(lib_dir.join("libdicm_ffi.a").exists(), "static library not built in {}", lib_dir.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(lib_dir.join("libdicm_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).current_dir(dir.path()).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout), "ok\n");
}
