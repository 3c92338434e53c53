//! C interface to the multida toolkit.
//!
//! Every fallible function returns an [`MdaStatus`]; on failure the message is
//! kept per thread and can be read with [`mda_last_error_message`]. Objects
//! cross the boundary as opaque handles that the caller frees exactly once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use multida::checkpoint::{load_checkpoint, save_checkpoint};
use multida::config::ExperimentConfig;
use multida::data::{gen_glyphs, load_idx, Dataset};
use multida::model::BranchedModel;
use multida::tensor::Tensor;
use multida::trainer::{evaluate_branches, train, NoObserver};
use multida::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Contract = 6,
    Training = 7,
    Panic = 8,
}

/// Opaque dataset handle.
pub struct MdaDataset {
    inner: Dataset,
}

/// Opaque model handle (all branches).
pub struct MdaModel {
    inner: BranchedModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(e: &Error) -> MdaStatus {
    match e {
        Error::Config { .. } => MdaStatus::Config,
        Error::Io { .. } | Error::Locked(_) => MdaStatus::Io,
        Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::Json(_) => MdaStatus::Format,
        Error::NonFinite { .. } => MdaStatus::Training,
        _ => MdaStatus::Contract,
    }
}

struct Failure(MdaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MdaStatus::NullArgument, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MdaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, turning errors and panics into a status plus the last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_last_error();
            MdaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("panic: {msg}"));
            MdaStatus::Panic
        }
    }
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

unsafe fn handle<'a, H>(h: *const H, what: &str) -> Result<&'a H, Failure> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, V>(p: *mut V, what: &str) -> Result<&'a mut V, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Byte length of the last error message on this thread, without the NUL.
/// Zero when the last call succeeded.
#[no_mangle]
pub extern "C" fn mda_last_error_length() -> usize {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mda_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let bytes = slot.as_ref().map_or(&[][..], |c| c.as_bytes());
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Synthetic glyph dataset: `n` samples of `classes` classes at `size × size`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn mda_dataset_glyphs(
    classes: usize,
    n: usize,
    size: usize,
    noise: f64,
    seed: u64,
    out: *mut *mut MdaDataset,
) -> MdaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner = gen_glyphs(classes, n, size, noise, seed)?;
        *out = Box::into_raw(Box::new(MdaDataset { inner }));
        Ok(())
    })
}

/// Loads an IDX image/label file pair.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mda_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut MdaDataset,
) -> MdaStatus {
    guard(|| {
        let images = path_arg(images, "images")?;
        let labels = path_arg(labels, "labels")?;
        let out = out_ptr(out, "out")?;
        let inner = load_idx(&images, &labels)?;
        *out = Box::into_raw(Box::new(MdaDataset { inner }));
        Ok(())
    })
}

/// Number of samples, or zero for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mda_dataset_len(dataset: *const MdaDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mda_dataset_free(dataset: *mut MdaDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains the model described by a TOML experiment config and returns it.
/// Artifacts are not written; use [`mda_model_save`] for the checkpoint.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mda_train_from_config(config_path: *const c_char, out: *mut *mut MdaModel) -> MdaStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let out = out_ptr(out, "out")?;
        let cfg = ExperimentConfig::load(&path)?;
        let (train_set, test_set) = cfg.load_data()?;
        let tc = cfg.train_config(&train_set);
        let outcome = train(&tc, &train_set, Some(&test_set), &mut NoObserver)?;
        *out = Box::into_raw(Box::new(MdaModel { inner: outcome.model }));
        Ok(())
    })
}

/// Loads a checkpoint written by the CLI or [`mda_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mda_model_load(path: *const c_char, out: *mut *mut MdaModel) -> MdaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        let inner = load_checkpoint::<f32>(&path)?;
        *out = Box::into_raw(Box::new(MdaModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mda_model_save(model: *const MdaModel, path: *const c_char) -> MdaStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&model.inner, &path)?;
        Ok(())
    })
}

/// Number of branches, or zero for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mda_model_num_branches(model: *const MdaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_branches())
}

/// Single-branch network made of the shared blocks and branch `branch`.
///
/// # Safety
/// `model` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mda_model_export_branch(
    model: *const MdaModel,
    branch: usize,
    out: *mut *mut MdaModel,
) -> MdaStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let out = out_ptr(out, "out")?;
        let inner = model.inner.export_branch(branch)?;
        *out = Box::into_raw(Box::new(MdaModel { inner }));
        Ok(())
    })
}

/// Writes the accuracy of every branch on `dataset` into `accuracy`, which
/// must hold `capacity ≥ mda_model_num_branches(model)` doubles.
///
/// # Safety
/// Handles must be live; `accuracy` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mda_model_evaluate(
    model: *const MdaModel,
    dataset: *const MdaDataset,
    accuracy: *mut f64,
    capacity: usize,
) -> MdaStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let dataset = handle(dataset, "dataset")?;
        if accuracy.is_null() {
            return Err(null("accuracy"));
        }
        let n = model.inner.num_branches();
        if capacity < n {
            return Err(invalid(format!("capacity {capacity} is below the branch count {n}")));
        }
        let acc = evaluate_branches(&model.inner, &dataset.inner)?;
        let dst = std::slice::from_raw_parts_mut(accuracy, n);
        dst.copy_from_slice(&acc);
        Ok(())
    })
}

/// Class probabilities of branch `branch` for `count` images laid out as
/// `[count, channels, height, width]` floats. `probs` receives
/// `count × num_classes` values.
///
/// # Safety
/// `pixels` must point to `count·channels·height·width` floats and `probs`
/// to `probs_len` writable floats.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mda_model_predict(
    model: *const MdaModel,
    branch: usize,
    pixels: *const f32,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    probs: *mut f32,
    probs_len: usize,
) -> MdaStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        if branch >= model.inner.num_branches() {
            return Err(invalid(format!("branch {branch} out of range")));
        }
        let len = count * channels * height * width;
        if len == 0 {
            return Err(invalid("empty input"));
        }
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        let x = Tensor::new(&[count, channels, height, width], data, false)?;
        let out = model.inner.predict(&x)?;
        let p = out[branch].data();
        if probs_len < p.len() {
            return Err(invalid(format!("probs holds {probs_len} values, need {}", p.len())));
        }
        std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(p);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mda_model_free(model: *mut MdaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
