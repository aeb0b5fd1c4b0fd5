//! C ABI over the `coreface` library.
//!
//! Every fallible function returns an `int32_t` status (`CF_OK` on success).
//! On failure the message is available from `cf_last_error` on the same
//! thread until the next failing call. Objects are opaque handles created by
//! `*_new`/`*_load`/`*_generate`/`cf_train` and released with the matching
//! `*_free`; passing NULL to a `*_free` function is a no-op.
//!
//! Embedding buffers are row-major `double` arrays. Two-view batches hold
//! `2 * n_images` rows, with the second view of image `i` at row
//! `n_images + i`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use coreface::data::{self, Dataset, IdentitySpec};
use coreface::error::Error;
use coreface::eval::{self, Pair, PairList};
use coreface::losses::{self, ClassifierHead, HeadKind};
use coreface::margin::{self, MarginState};
use coreface::numerics::{EmbeddingBatch, Mat};
use coreface::pairing::{build_plan, PairPlan, Protocol, ScmMode};
use coreface::trainer::{self, Model};
use coreface::TrainConfig;

pub const CF_OK: i32 = 0;
/// A required pointer argument was NULL.
pub const CF_ERR_NULL: i32 = 1;
/// An argument or configuration value is out of range.
pub const CF_ERR_INVALID: i32 = 2;
/// Buffer sizes or shapes disagree.
pub const CF_ERR_DIMENSION: i32 = 3;
/// Zero norms, non-finite values or other numerical failures.
pub const CF_ERR_NUMERIC: i32 = 4;
/// The batch or pair list cannot support the requested computation.
pub const CF_ERR_DEGENERATE: i32 = 5;
/// Malformed file contents or configuration text.
pub const CF_ERR_FORMAT: i32 = 6;
pub const CF_ERR_IO: i32 = 7;
/// The library panicked; this indicates a bug.
pub const CF_ERR_INTERNAL: i32 = 8;

pub const CF_PROTOCOL_S_N: i32 = 0;
pub const CF_PROTOCOL_S_2N: i32 = 1;
pub const CF_PROTOCOL_D_N: i32 = 2;
pub const CF_PROTOCOL_D_2N: i32 = 3;

pub const CF_SCM_OFF: i32 = 0;
pub const CF_SCM_ZERO: i32 = 1;
pub const CF_SCM_EXCLUDE: i32 = 2;

pub const CF_HEAD_SOFTMAX: i32 = 0;
pub const CF_HEAD_COSFACE: i32 = 1;
pub const CF_HEAD_ARCFACE: i32 = 2;

/// Opaque dataset handle.
pub struct CfDataset(Dataset);

/// Opaque trained-model handle (encoder and classifier head).
pub struct CfModel(Model);

/// Opaque adaptive-margin state.
pub struct CfMargin(MarginState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ZeroNorm { .. } | Error::NonFinite { .. } | Error::NumericalDomain(_) => CF_ERR_NUMERIC,
            Error::IndexOutOfRange { .. } | Error::DimensionMismatch { .. } | Error::ShapeMismatch { .. } => {
                CF_ERR_DIMENSION
            }
            Error::TooFewImages(_)
            | Error::EmptyPool { .. }
            | Error::DegenerateClass { .. }
            | Error::DegenerateBatch(_)
            | Error::DegenerateFold { .. }
            | Error::InsufficientNegatives { .. }
            | Error::EmptyGallery => CF_ERR_DEGENERATE,
            Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Corrupt(_) | Error::Parse { .. } => {
                CF_ERR_FORMAT
            }
            Error::Io(_) => CF_ERR_IO,
            Error::InvalidProbability(_) | Error::InvalidSpec(_) | Error::Validation { .. } => CF_ERR_INVALID,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CF_OK,
        Ok(Err(e)) => {
            set_last_error(e.message);
            e.code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            CF_ERR_INTERNAL
        }
    }
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(CF_ERR_NULL, format!("{what} is NULL")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(CF_ERR_NULL, format!("{what} is NULL")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(CF_ERR_NULL, format!("{what} is NULL")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(CF_ERR_NULL, format!("{what} is NULL")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(CF_ERR_NULL, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CF_ERR_INVALID, format!("{what} is not valid UTF-8")))
}

fn protocol(code: i32) -> Result<Protocol, Failure> {
    match code {
        CF_PROTOCOL_S_N => Ok(Protocol::S_N),
        CF_PROTOCOL_S_2N => Ok(Protocol::S_2N),
        CF_PROTOCOL_D_N => Ok(Protocol::D_N),
        CF_PROTOCOL_D_2N => Ok(Protocol::D_2N),
        other => Err(fail(CF_ERR_INVALID, format!("unknown protocol code {other}"))),
    }
}

fn scm(code: i32) -> Result<ScmMode, Failure> {
    match code {
        CF_SCM_OFF => Ok(ScmMode::Off),
        CF_SCM_ZERO => Ok(ScmMode::Zero),
        CF_SCM_EXCLUDE => Ok(ScmMode::Exclude),
        other => Err(fail(CF_ERR_INVALID, format!("unknown SCM code {other}"))),
    }
}

fn head_kind(code: i32) -> Result<HeadKind, Failure> {
    match code {
        CF_HEAD_SOFTMAX => Ok(HeadKind::Softmax),
        CF_HEAD_COSFACE => Ok(HeadKind::Cosface),
        CF_HEAD_ARCFACE => Ok(HeadKind::Arcface),
        other => Err(fail(CF_ERR_INVALID, format!("unknown head code {other}"))),
    }
}

fn rows_len(rows: usize, dim: usize) -> Result<usize, Failure> {
    rows.checked_mul(dim)
        .ok_or_else(|| fail(CF_ERR_DIMENSION, "buffer size overflows"))
}

/// Two-view batch plus its pairing plan from raw buffers.
unsafe fn two_view(
    embeddings: *const f64,
    n_images: usize,
    dim: usize,
    labels: *const u32,
    protocol_code: i32,
    scm_code: i32,
) -> Result<(EmbeddingBatch, PairPlan), Failure> {
    let rows = n_images
        .checked_mul(2)
        .ok_or_else(|| fail(CF_ERR_DIMENSION, "batch size overflows"))?;
    let e = in_slice(embeddings, rows_len(rows, dim)?, "embeddings")?;
    let l: Vec<usize> = in_slice(labels, n_images, "labels")?
        .iter()
        .map(|&v| v as usize)
        .collect();
    let batch = EmbeddingBatch::paired(Mat::from_vec(rows, dim, e.to_vec())?, &l)?;
    let plan = build_plan(n_images, &l, protocol(protocol_code)?, scm(scm_code)?)?;
    Ok((batch, plan))
}

fn write_grad(grad: *mut f64, g: &Mat) -> Result<(), Failure> {
    if !grad.is_null() {
        let out = unsafe { out_slice(grad, g.as_slice().len(), "grad")? };
        out.copy_from_slice(g.as_slice());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---------------------------------------------------------------- losses

/// CoReFace contrastive loss of a two-view batch with adaptive margin `m_c`
/// and scale `s`. `grad` (nullable) receives `2 * n_images * dim` values.
#[no_mangle]
pub unsafe extern "C" fn cf_coreface_loss(
    embeddings: *const f64,
    n_images: usize,
    dim: usize,
    labels: *const u32,
    protocol: i32,
    scm: i32,
    m_c: f64,
    s: f64,
    value: *mut f64,
    grad: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_ref(value, "value")?;
        let (batch, plan) = two_view(embeddings, n_images, dim, labels, protocol, scm)?;
        let r = losses::coreface_loss(&batch, &plan, m_c, s)?;
        write_grad(grad, &r.grad_embeddings)?;
        *out = r.value;
        Ok(())
    })
}

/// NT-Xent loss of a two-view batch at temperature `tau`.
#[no_mangle]
pub unsafe extern "C" fn cf_ntxent_loss(
    embeddings: *const f64,
    n_images: usize,
    dim: usize,
    tau: f64,
    value: *mut f64,
    grad: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_ref(value, "value")?;
        let rows = n_images.saturating_mul(2);
        let e = in_slice(embeddings, rows_len(rows, dim)?, "embeddings")?;
        let batch = EmbeddingBatch::paired(Mat::from_vec(rows, dim, e.to_vec())?, &(0..n_images).collect::<Vec<_>>())?;
        let r = losses::ntxent_loss(&batch, tau)?;
        write_grad(grad, &r.grad_embeddings)?;
        *out = r.value;
        Ok(())
    })
}

/// Supervised contrastive loss of a two-view batch at temperature `tau`.
#[no_mangle]
pub unsafe extern "C" fn cf_supcon_loss(
    embeddings: *const f64,
    n_images: usize,
    dim: usize,
    labels: *const u32,
    tau: f64,
    value: *mut f64,
    grad: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_ref(value, "value")?;
        let (batch, _) = two_view(embeddings, n_images, dim, labels, CF_PROTOCOL_S_N, CF_SCM_OFF)?;
        let r = losses::supcon_loss(&batch, tau)?;
        write_grad(grad, &r.grad_embeddings)?;
        *out = r.value;
        Ok(())
    })
}

/// Mean margin classification loss over `rows` embeddings against a
/// `dim x classes` weight matrix (row-major). `grad` (nullable) receives the
/// embedding gradient, `grad_weight` (nullable) the weight gradient.
#[no_mangle]
pub unsafe extern "C" fn cf_classification_loss(
    embeddings: *const f64,
    rows: usize,
    dim: usize,
    labels: *const u32,
    weight: *const f64,
    classes: usize,
    head: i32,
    s: f64,
    m: f64,
    value: *mut f64,
    grad: *mut f64,
    grad_weight: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_ref(value, "value")?;
        if rows == 0 {
            return Err(fail(CF_ERR_DIMENSION, "no embedding rows"));
        }
        let e = in_slice(embeddings, rows_len(rows, dim)?, "embeddings")?;
        let w = in_slice(weight, rows_len(dim, classes)?, "weight")?;
        let l: Vec<usize> = in_slice(labels, rows, "labels")?.iter().map(|&v| v as usize).collect();
        let head = ClassifierHead::new(Mat::from_vec(dim, classes, w.to_vec())?, s, m, head_kind(head)?)?;
        let r = losses::classification_batch(&Mat::from_vec(rows, dim, e.to_vec())?, &l, &head, 1.0 / rows as f64)?;
        write_grad(grad, &r.grad_embeddings)?;
        if let Some(gw) = &r.grad_weights {
            write_grad(grad_weight, gw)?;
        }
        *out = r.value;
        Ok(())
    })
}

// ---------------------------------------------------------------- margin

/// Batch margin: mean over images of the view-pair similarity minus the
/// hardest negative under the given protocol and mask mode.
#[no_mangle]
pub unsafe extern "C" fn cf_batch_margin(
    embeddings: *const f64,
    n_images: usize,
    dim: usize,
    labels: *const u32,
    protocol: i32,
    scm: i32,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_ref(out, "out")?;
        let (batch, plan) = two_view(embeddings, n_images, dim, labels, protocol, scm)?;
        *out = margin::batch_margin(&batch, &plan)?;
        Ok(())
    })
}

/// New margin state with momentum `alpha` and value 0.
#[no_mangle]
pub unsafe extern "C" fn cf_margin_new(alpha: f64, out: *mut *mut CfMargin) -> i32 {
    guard(|| {
        let out = out_ref(out, "out")?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(fail(CF_ERR_INVALID, format!("alpha {alpha} outside [0, 1]")));
        }
        *out = Box::into_raw(Box::new(CfMargin(MarginState::new(alpha))));
        Ok(())
    })
}

/// Fold one batch margin into the state.
#[no_mangle]
pub unsafe extern "C" fn cf_margin_update(state: *mut CfMargin, m_k: f64) -> i32 {
    guard(|| {
        let st = out_ref(state, "state")?;
        st.0 = margin::ema_update(st.0, m_k)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_margin_value(state: *const CfMargin, out: *mut f64) -> i32 {
    guard(|| {
        *out_ref(out, "out")? = handle(state, "state")?.0.m_c;
        Ok(())
    })
}

/// Number of updates applied so far.
#[no_mangle]
pub unsafe extern "C" fn cf_margin_steps(state: *const CfMargin, out: *mut u64) -> i32 {
    guard(|| {
        *out_ref(out, "out")? = handle(state, "state")?.0.step;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_margin_free(state: *mut CfMargin) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

// ---------------------------------------------------------------- metrics

/// Cross-validated verification accuracy. `fold[i]` assigns pair `i` to one
/// of `folds` folds; `same[i]` is nonzero for same-identity pairs.
#[no_mangle]
pub unsafe extern "C" fn cf_verification_accuracy(
    sims: *const f64,
    same: *const u8,
    fold: *const u32,
    n_pairs: usize,
    folds: u32,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_ref(out, "out")?;
        let s = in_slice(sims, n_pairs, "sims")?;
        let same = in_slice(same, n_pairs, "same")?;
        let fold = in_slice(fold, n_pairs, "fold")?;
        if let Some(&f) = fold.iter().find(|&&f| f >= folds) {
            return Err(fail(CF_ERR_INVALID, format!("fold index {f} >= fold count {folds}")));
        }
        let pairs = PairList {
            pairs: (0..n_pairs)
                .map(|i| Pair {
                    a: 0,
                    b: 0,
                    same: same[i] != 0,
                    fold: fold[i] as usize,
                })
                .collect(),
            folds: folds as usize,
        };
        *out = eval::verification_accuracy(s, &pairs)?;
        Ok(())
    })
}

/// True accept rate at false accept rate `far`; also reports the threshold.
#[no_mangle]
pub unsafe extern "C" fn cf_tar_at_far(
    pos: *const f64,
    n_pos: usize,
    neg: *const f64,
    n_neg: usize,
    far: f64,
    tar: *mut f64,
    threshold: *mut f64,
) -> i32 {
    guard(|| {
        let tar = out_ref(tar, "tar")?;
        let p = in_slice(pos, n_pos, "pos")?;
        let n = in_slice(neg, n_neg, "neg")?;
        let r = eval::tar_at_far(p, n, far)?;
        *tar = r.tar;
        if let Some(t) = threshold.as_mut() {
            *t = r.threshold;
        }
        Ok(())
    })
}

/// Rank-1 identification rate of probe rows against gallery rows.
#[no_mangle]
pub unsafe extern "C" fn cf_rank1(
    gallery: *const f64,
    gallery_labels: *const u32,
    n_gallery: usize,
    probe: *const f64,
    probe_labels: *const u32,
    n_probe: usize,
    dim: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let out = out_ref(out, "out")?;
        let batch = |e: *const f64, l: *const u32, n: usize, what: &str| -> Result<EmbeddingBatch, Failure> {
            let e = in_slice(e, rows_len(n, dim)?, what)?;
            let l = in_slice(l, n, "labels")?.iter().map(|&v| v as usize).collect();
            Ok(EmbeddingBatch::new(Mat::from_vec(n, dim, e.to_vec())?, l)?)
        };
        let g = batch(gallery, gallery_labels, n_gallery, "gallery")?;
        let p = batch(probe, probe_labels, n_probe, "probe")?;
        *out = eval::rank1(&g, &p)?;
        Ok(())
    })
}

// ---------------------------------------------------------------- datasets

/// Generate train and eval splits from a JSON identity spec (NULL or "{}"
/// for defaults).
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_generate(
    spec_json: *const c_char,
    train: *mut *mut CfDataset,
    eval: *mut *mut CfDataset,
) -> i32 {
    guard(|| {
        let train = out_ref(train, "train")?;
        let eval = out_ref(eval, "eval")?;
        let spec: IdentitySpec = if spec_json.is_null() {
            IdentitySpec::default()
        } else {
            serde_json::from_str(c_str(spec_json, "spec_json")?)
                .map_err(|e| fail(CF_ERR_FORMAT, format!("identity spec: {e}")))?
        };
        let (tr, ev) = data::generate(&spec)?;
        *train = Box::into_raw(Box::new(CfDataset(tr)));
        *eval = Box::into_raw(Box::new(CfDataset(ev)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_dataset_load(path: *const c_char, out: *mut *mut CfDataset) -> i32 {
    guard(|| {
        let out = out_ref(out, "out")?;
        let ds = Dataset::load(PathBuf::from(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(CfDataset(ds)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_dataset_save(ds: *const CfDataset, path: *const c_char) -> i32 {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        ds.0.save(PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Sample count and input dimension.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_shape(ds: *const CfDataset, samples: *mut usize, input_dim: *mut usize) -> i32 {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        *out_ref(samples, "samples")? = ds.0.len();
        *out_ref(input_dim, "input_dim")? = ds.0.input_dim();
        Ok(())
    })
}

/// Copy inputs (`samples * input_dim` values) and labels (`samples`
/// values); either destination may be NULL.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_copy(ds: *const CfDataset, inputs: *mut f64, labels: *mut u32) -> i32 {
    guard(|| {
        let ds = &handle(ds, "dataset")?.0;
        if !inputs.is_null() {
            out_slice(inputs, ds.inputs.as_slice().len(), "inputs")?.copy_from_slice(ds.inputs.as_slice());
        }
        if !labels.is_null() {
            out_slice(labels, ds.labels.len(), "labels")?.copy_from_slice(&ds.labels);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_dataset_free(ds: *mut CfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---------------------------------------------------------------- models

fn parse_config(json: *const c_char) -> Result<TrainConfig, Failure> {
    if json.is_null() {
        return Ok(TrainConfig::default());
    }
    Ok(TrainConfig::from_json(unsafe { c_str(json, "config_json")? })?)
}

/// Train on `train` with a JSON configuration (NULL for defaults).
#[no_mangle]
pub unsafe extern "C" fn cf_train(config_json: *const c_char, train: *const CfDataset, out: *mut *mut CfModel) -> i32 {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = parse_config(config_json)?;
        let ds = handle(train, "train")?;
        let outcome = trainer::train(&cfg, &ds.0, None)?;
        *out = Box::into_raw(Box::new(CfModel(outcome.model)));
        Ok(())
    })
}

/// Load a checkpoint; the head's scale, margin and kind come from
/// `config_json` (NULL for defaults).
#[no_mangle]
pub unsafe extern "C" fn cf_model_load(path: *const c_char, config_json: *const c_char, out: *mut *mut CfModel) -> i32 {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = parse_config(config_json)?;
        let model = Model::load(PathBuf::from(c_str(path, "path")?), &cfg)?;
        *out = Box::into_raw(Box::new(CfModel(model)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_model_save(model: *const CfModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        m.0.save(PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_model_dims(model: *const CfModel, input_dim: *mut usize, embed_dim: *mut usize) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        *out_ref(input_dim, "input_dim")? = m.0.encoder.input_dim();
        *out_ref(embed_dim, "embed_dim")? = m.0.encoder.embed_dim();
        Ok(())
    })
}

/// Unit-norm embeddings of `rows` inputs; `out` receives `rows * embed_dim`
/// values.
#[no_mangle]
pub unsafe extern "C" fn cf_model_embed(model: *const CfModel, inputs: *const f64, rows: usize, out: *mut f64) -> i32 {
    guard(|| {
        let enc = &handle(model, "model")?.0.encoder;
        let x = in_slice(inputs, rows_len(rows, enc.input_dim())?, "inputs")?;
        let e = enc.embed(&Mat::from_vec(rows, enc.input_dim(), x.to_vec())?)?;
        out_slice(out, e.as_slice().len(), "out")?.copy_from_slice(e.as_slice());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cf_model_free(model: *mut CfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
