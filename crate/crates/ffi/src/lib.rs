//! C ABI over the capalign inference path and metric kernels.
//!
//! Every fallible function returns a [`CapStatus`]. On failure the message is
//! kept per thread and can be read with [`cap_last_error_message`]. Output
//! buffers are written only when the call succeeds.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use capalign::align::{clip_loss_with_grads, AlignError};
use capalign::encoders::{DualEncoder, EncoderError};
use capalign::matrix::Matrix;
use capalign::metrics::{average_precision, pr_curve, roc_curve, MetricsError, RankingJudgments};
use capalign::trainer::{Checkpoint, TrainError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    ShapeMismatch = 5,
    Numeric = 6,
    Panic = 7,
}

/// Opaque trained model loaded from a checkpoint.
pub struct CapModel {
    encoder: DualEncoder,
}

struct Failure(CapStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(CapStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(CapStatus::InvalidArgument, msg.into())
    }
}

impl From<AlignError> for Failure {
    fn from(e: AlignError) -> Self {
        let status = match e {
            AlignError::ShapeMismatch(_) | AlignError::NonSquare { .. } => CapStatus::ShapeMismatch,
            AlignError::NonFinite(_) | AlignError::ZeroNorm { .. } => CapStatus::Numeric,
            _ => CapStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<EncoderError> for Failure {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Align(a) => a.into(),
            EncoderError::ShapeMismatch { .. } => Failure(CapStatus::ShapeMismatch, e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let status = match e {
            MetricsError::LengthMismatch(..) => CapStatus::ShapeMismatch,
            MetricsError::NonFinite => CapStatus::Numeric,
            _ => CapStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match e {
            TrainError::Io { .. } => CapStatus::Io,
            TrainError::BadCheckpoint { .. } | TrainError::FingerprintMismatch { .. } => CapStatus::BadCheckpoint,
            TrainError::Encoder(ref inner) => return inner.clone().into(),
            _ => CapStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CapStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CapStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_owned());
            set_last_error(&format!("internal panic: {msg}"));
            CapStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not valid UTF-8")))
}

fn write_embedding(v: &[f64], out: &mut [f64]) -> Result<(), Failure> {
    if out.len() != v.len() {
        return Err(Failure(
            CapStatus::ShapeMismatch,
            format!("output buffer holds {} values, embedding has {}", out.len(), v.len()),
        ));
    }
    out.copy_from_slice(v);
    Ok(())
}

fn to_bools(raw: &[u8]) -> Vec<bool> {
    raw.iter().map(|&b| b != 0).collect()
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next capalign call on the same thread.
#[no_mangle]
pub extern "C" fn cap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint file. On success `*out` owns a model that must be
/// released with [`cap_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cap_model_load(path: *const c_char, out: *mut *mut CapModel) -> CapStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let path = c_str(path, "path")?;
        let encoder = Checkpoint::load(Path::new(path))?.encoder()?;
        *out = Box::into_raw(Box::new(CapModel { encoder }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cap_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cap_model_free(model: *mut CapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cap_model_embed_dim(model: *const CapModel) -> usize {
    model.as_ref().map_or(0, |m| m.encoder.embed_dim())
}

/// Image feature dimension the model expects, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cap_model_image_dim(model: *const CapModel) -> usize {
    model.as_ref().map_or(0, |m| m.encoder.params.image_head.in_dim())
}

/// Learned temperature, or NaN for a null model.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn cap_model_temperature(model: *const CapModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.encoder.temperature())
}

/// Unit text embedding of a caption into `out[0..out_len]`; `out_len` must
/// equal the embedding dimension.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn cap_model_embed_text(
    model: *const CapModel,
    text: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> CapStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        let text = c_str(text, "text")?;
        let out = output(out, out_len, "out")?;
        let e = m.encoder.embed_text(text)?;
        write_embedding(e.as_slice(), out)
    })
}

/// Unit image embedding of a feature vector.
///
/// # Safety
/// `features` must be valid for `n` reads and `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn cap_model_embed_image(
    model: *const CapModel,
    features: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> CapStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        let x = input(features, n, "features")?;
        let out = output(out, out_len, "out")?;
        let e = m.encoder.embed_image(x)?;
        write_embedding(e.as_slice(), out)
    })
}

/// Symmetric contrastive loss of `n` paired rows of width `d` (row-major),
/// scaled by `exp(log_inv_tau)`. Gradient outputs may be null to skip them;
/// `grad_u` and `grad_v` hold `n * d` values.
///
/// # Safety
/// `u` and `v` must be valid for `n * d` reads; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cap_clip_loss(
    u: *const f64,
    v: *const f64,
    n: usize,
    d: usize,
    log_inv_tau: f64,
    loss_out: *mut f64,
    grad_u: *mut f64,
    grad_v: *mut f64,
    grad_log_inv_tau: *mut f64,
) -> CapStatus {
    guard(|| {
        if loss_out.is_null() {
            return Err(Failure::null("loss_out"));
        }
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Failure::invalid("n * d overflows"))?;
        let u = Matrix::from_vec(n, d, input(u, len, "u")?.to_vec());
        let v = Matrix::from_vec(n, d, input(v, len, "v")?.to_vec());
        let r = clip_loss_with_grads(&u, &v, log_inv_tau)?;
        *loss_out = r.loss_total;
        if !grad_u.is_null() {
            output(grad_u, len, "grad_u")?.copy_from_slice(r.grad_u.as_slice());
        }
        if !grad_v.is_null() {
            output(grad_v, len, "grad_v")?.copy_from_slice(r.grad_v.as_slice());
        }
        if !grad_log_inv_tau.is_null() {
            *grad_log_inv_tau = r.grad_log_inv_tau;
        }
        Ok(())
    })
}

/// Average precision of a ranked relevance list (non-zero = relevant).
/// `total_relevant` counts relevant items in the whole corpus; pass 0 to use
/// the number of relevant entries in the list.
///
/// # Safety
/// `relevance` must be valid for `n` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cap_average_precision(
    relevance: *const u8,
    n: usize,
    total_relevant: usize,
    out: *mut f64,
) -> CapStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let rel = to_bools(input(relevance, n, "relevance")?);
        let j = if total_relevant == 0 {
            RankingJudgments::complete(rel)
        } else {
            RankingJudgments::new(rel, total_relevant)?
        };
        *out = average_precision(&j)?;
        Ok(())
    })
}

/// Area under the ROC curve for binary `labels` (non-zero = positive).
///
/// # Safety
/// `scores` and `labels` must be valid for `n` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cap_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> CapStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let (_, area) = roc_curve(input(scores, n, "scores")?, &to_bools(input(labels, n, "labels")?))?;
        *out = area;
        Ok(())
    })
}

/// Area under the precision-recall curve.
///
/// # Safety
/// `scores` and `labels` must be valid for `n` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cap_auprc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> CapStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let (_, area) = pr_curve(input(scores, n, "scores")?, &to_bools(input(labels, n, "labels")?))?;
        *out = area;
        Ok(())
    })
}
