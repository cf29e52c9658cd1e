//! C interface to the dicm model and metrics.
//!
//! Every function returns a [`DicmStatus`]. On failure, the message for
//! the calling thread is available from [`dicm_last_error_message`] until
//! the next failing call on that thread. Output pointers are written only
//! on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use dicm::ams::{accounting, AccountingInput, Mode};
use dicm::config::ExperimentConfig;
use dicm::data::{read_samples, ImageFeatureStore, Matrix32, Sample};
use dicm::deployment::{export_inference, InferenceTable};
use dicm::experiment::{load_model, IMAGES_FILE, TRAIN_FILE};
use dicm::metrics::{self, ScoredImpression};
use dicm::Error;

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DicmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    UnknownImage = 6,
    OutOfVocabulary = 7,
    Undefined = 8,
    Checkpoint = 9,
    Internal = 10,
}

impl From<&Error> for DicmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => DicmStatus::Io,
            Error::Format { .. } => DicmStatus::Format,
            Error::Config(_) | Error::ConfigParse { .. } => DicmStatus::Config,
            Error::UnknownImage(_) => DicmStatus::UnknownImage,
            Error::OutOfVocabulary { .. } => DicmStatus::OutOfVocabulary,
            Error::UndefinedAuc | Error::NoEligibleUser => DicmStatus::Undefined,
            Error::MissingGroup(_) | Error::GroupMismatch { .. } => DicmStatus::Checkpoint,
            Error::Dimension { .. } | Error::Contract(_) => DicmStatus::InvalidArgument,
            _ => DicmStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DicmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DicmStatus::from(&e), e.to_string())
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DicmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DicmStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let detail = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("internal error: {detail}"));
            DicmStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DicmStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(DicmStatus::InvalidArgument, message.into())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failing call on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn dicm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forgets the last error message of this thread.
#[no_mangle]
pub extern "C" fn dicm_clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

// ---------------------------------------------------------------- model

/// A trained model with its image embeddings precomputed.
pub struct DicmModel {
    table: InferenceTable,
    images: ImageFeatureStore,
}

/// One impression to score. `behavior_items` and `behavior_images` both
/// point to `behavior_len` ids and may be null when it is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DicmSample {
    pub user_id: u32,
    pub scenario_id: u32,
    pub ad_id: u32,
    pub category_id: u32,
    pub ad_image: u32,
    pub behavior_items: *const u32,
    pub behavior_images: *const u32,
    pub behavior_len: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DicmPrediction {
    pub logit: f64,
    pub probability: f64,
}

fn images_in(dir: &Path) -> Result<ImageFeatureStore, Failure> {
    Ok(ImageFeatureStore::from_matrix(Matrix32::read(&dir.join(IMAGES_FILE))?))
}

/// Opens the model in `checkpoint_path`, built with the configuration in
/// `config_path`, and embeds every image of `data_dir/images.dmat`.
/// Images that only appear later are embedded on demand when scored.
///
/// # Safety
/// Path arguments must be nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_model_open(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    data_dir: *const c_char,
    out: *mut *mut DicmModel,
) -> DicmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config = ExperimentConfig::load(&path_arg(config_path, "config_path")?)?;
        let model = load_model(&config, &path_arg(checkpoint_path, "checkpoint_path")?)?;
        let images = images_in(&path_arg(data_dir, "data_dir")?)?;
        let table = export_inference(&model, &images)?;
        *out = Box::into_raw(Box::new(DicmModel { table, images }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`dicm_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dicm_model_free(model: *mut DicmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of images with a precomputed embedding.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_model_image_count(model: *const DicmModel, out: *mut usize) -> DicmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = m.table.len();
        Ok(())
    })
}

unsafe fn to_sample(s: &DicmSample) -> Result<Sample, Failure> {
    Ok(Sample {
        user_id: s.user_id,
        day: 0,
        scenario_id: s.scenario_id,
        ad_id: s.ad_id,
        category_id: s.category_id,
        ad_image: s.ad_image,
        behavior_items: slice_arg(s.behavior_items, s.behavior_len, "behavior_items")?.to_vec(),
        behavior_images: slice_arg(s.behavior_images, s.behavior_len, "behavior_images")?.to_vec(),
        label: 0,
    })
}

fn score(m: &DicmModel, s: &Sample) -> Result<DicmPrediction, Failure> {
    let p = m.table.predict(s, Some(&m.images))?;
    Ok(DicmPrediction {
        logit: p.logit,
        probability: p.probability,
    })
}

/// Scores one impression.
///
/// # Safety
/// `model` must be a live handle, `sample` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_model_predict(
    model: *const DicmModel,
    sample: *const DicmSample,
    out: *mut DicmPrediction,
) -> DicmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = to_sample(sample.as_ref().ok_or_else(|| null("sample"))?)?;
        let out = out_arg(out, "out")?;
        *out = score(m, &s)?;
        Ok(())
    })
}

/// Scores `len` impressions into `out[0..len]`. Nothing is written unless
/// every impression scores.
///
/// # Safety
/// `samples` and `out` must hold `len` elements each.
#[no_mangle]
pub unsafe extern "C" fn dicm_model_predict_batch(
    model: *const DicmModel,
    samples: *const DicmSample,
    len: usize,
    out: *mut DicmPrediction,
) -> DicmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let samples = slice_arg(samples, len, "samples")?;
        if len > 0 && out.is_null() {
            return Err(null("out"));
        }
        let scored = samples
            .iter()
            .map(|s| score(m, &to_sample(s)?))
            .collect::<Result<Vec<_>, _>>()?;
        if len > 0 {
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(&scored);
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- metrics

/// Area under the ROC curve; tied scores count one half.
///
/// # Safety
/// `scores` and `labels` must hold `len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_auc(
    scores: *const f64,
    labels: *const u8,
    len: usize,
    out: *mut f64,
) -> DicmStatus {
    guard(|| {
        let scores = slice_arg(scores, len, "scores")?;
        let labels = slice_arg(labels, len, "labels")?;
        let out = out_arg(out, "out")?;
        *out = metrics::auc(scores, labels)?;
        Ok(())
    })
}

/// Impression-weighted mean of per-user AUC over users with both labels.
///
/// # Safety
/// `users`, `scores` and `labels` must hold `len` elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_gauc(
    users: *const u32,
    scores: *const f64,
    labels: *const u8,
    len: usize,
    out: *mut f64,
) -> DicmStatus {
    guard(|| {
        let users = slice_arg(users, len, "users")?;
        let scores = slice_arg(scores, len, "scores")?;
        let labels = slice_arg(labels, len, "labels")?;
        let out = out_arg(out, "out")?;
        let impressions: Vec<ScoredImpression> = (0..len)
            .map(|i| ScoredImpression {
                user: users[i],
                score: scores[i],
                label: labels[i],
            })
            .collect();
        *out = metrics::gauc(&impressions)?;
        Ok(())
    })
}

/// Mean binary cross-entropy of probabilities. `clamped` may be null;
/// otherwise it receives how many probabilities were clamped into (0, 1).
///
/// # Safety
/// `probabilities` and `labels` must hold `len` elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_log_loss(
    probabilities: *const f64,
    labels: *const u8,
    len: usize,
    out: *mut f64,
    clamped: *mut usize,
) -> DicmStatus {
    guard(|| {
        let probabilities = slice_arg(probabilities, len, "probabilities")?;
        let labels = slice_arg(labels, len, "labels")?;
        let out = out_arg(out, "out")?;
        let r = metrics::log_loss(probabilities, labels)?;
        *out = r.value;
        if let Some(c) = clamped.as_mut() {
            *c = r.clamped;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- accounting

/// Storage and traffic per mini-batch for one parameter-placement mode,
/// in bytes. `mode` is 0 for store-in-worker, 1 for ps-store-in-server
/// and 2 for ams.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DicmAccountingRow {
    pub mode: u32,
    pub worker_storage: f64,
    pub server_storage: f64,
    pub comm_all: f64,
    pub comm_image: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DicmAccounting {
    pub rows: [DicmAccountingRow; 3],
    pub raw_dim: usize,
    pub image_dim: usize,
    pub compression_ratio: f64,
    pub id_param_bytes: u64,
    pub batches: usize,
}

/// Accounting over the training split in `data_dir` with the cluster and
/// dimensions of `config_path`.
///
/// # Safety
/// Path arguments must be nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_accounting(
    config_path: *const c_char,
    data_dir: *const c_char,
    out: *mut DicmAccounting,
) -> DicmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let config = ExperimentConfig::load(&path_arg(config_path, "config_path")?)?;
        let dir = path_arg(data_dir, "data_dir")?;
        let samples = read_samples(&dir.join(TRAIN_FILE))?;
        let schema = config.model_config().schema;
        let report = accounting(AccountingInput {
            schema: &schema,
            samples: &samples,
            global_batch: config.cluster.global_batch(),
        });
        let mut result = DicmAccounting {
            raw_dim: report.raw_dim,
            image_dim: report.image_dim,
            compression_ratio: report.compression_ratio(),
            id_param_bytes: report.id_param_bytes,
            batches: report.batches.len(),
            ..DicmAccounting::default()
        };
        for (i, mode) in Mode::ALL.into_iter().enumerate() {
            let r = report.row(mode);
            result.rows[i] = DicmAccountingRow {
                mode: i as u32,
                worker_storage: r.per_batch(r.worker_storage),
                server_storage: r.per_batch(r.server_storage),
                comm_all: r.per_batch(r.comm_all),
                comm_image: r.per_batch(r.comm_image),
            };
        }
        *out = result;
        Ok(())
    })
}

/// Raw feature width over embedded width.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dicm_compression_ratio(raw_dim: usize, image_dim: usize, out: *mut f64) -> DicmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if raw_dim == 0 || image_dim == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        *out = raw_dim as f64 / image_dim as f64;
        Ok(())
    })
}
