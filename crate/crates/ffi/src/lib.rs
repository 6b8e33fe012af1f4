//! C ABI over the `prema` crate.
//!
//! Models are opaque handles created by [`prema_model_load`] and released with
//! [`prema_model_free`]. Every fallible call returns a [`PremaStatus`]; the
//! message of the most recent failure on the calling thread is available from
//! [`prema_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prema::aggregator::{embed, PremaParams};
use prema::checkpoint::load_model;
use prema::dataset::read_view_image;
use prema::metrics::average_precision;
use prema::{Error, Tensor};

/// Result codes shared by every function in this library.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PremaStatus {
    Ok = 0,
    Validation = 1,
    Io = 2,
    Checkpoint = 3,
    NullPointer = 4,
    Panic = 5,
}

/// A loaded model. Only ever handled through a pointer.
pub struct PremaModel {
    params: PremaParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PremaStatus {
    match e.exit_code() {
        2 => PremaStatus::Io,
        3 => PremaStatus::Checkpoint,
        _ => PremaStatus::Validation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PremaStatus, String)>) -> PremaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PremaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PremaStatus::Panic
        }
    }
}

fn lift(e: Error) -> (PremaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PremaStatus, String) {
    (PremaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (PremaStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (PremaStatus::Validation, "path is not valid UTF-8".into()))
}

unsafe fn model_arg<'a>(m: *const PremaModel) -> Result<&'a PremaModel, (PremaStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn prema_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a stage-2 checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn prema_model_load(path: *const c_char, out: *mut *mut PremaModel) -> PremaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let params = load_model(path_arg(path)?).map_err(lift)?;
        *out = Box::into_raw(Box::new(PremaModel { params }));
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from [`prema_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn prema_model_free(model: *mut PremaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the shape descriptor, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prema_model_descriptor_dim(model: *const PremaModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.descriptor_dim())
}

/// Number of classes, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prema_model_num_classes(model: *const PremaModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.classes())
}

/// Side length of the square views the model expects, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prema_model_image_size(model: *const PremaModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.encoder.config.image_size)
}

unsafe fn views_arg(
    model: &PremaModel,
    images: *const f32,
    n_views: usize,
) -> Result<Vec<Tensor>, (PremaStatus, String)> {
    if images.is_null() {
        return Err(null("images"));
    }
    if n_views == 0 {
        return Err((PremaStatus::Validation, "at least one view is required".into()));
    }
    let s = model.params.encoder.config.image_size;
    let data = std::slice::from_raw_parts(images, n_views * s * s);
    data.chunks_exact(s * s)
        .map(|c| Tensor::new(&[1, s, s], c.iter().map(|&v| v as f64).collect()).map_err(lift))
        .collect()
}

/// Embeds `n_views` row-major images of `image_size²` floats each, in view
/// order, and writes the descriptor (`descriptor_dim` entries) to `out`.
///
/// # Safety
/// `images` must hold `n_views · image_size²` floats and `out` must have room
/// for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prema_embed(
    model: *const PremaModel,
    images: *const f32,
    n_views: usize,
    out: *mut f64,
    out_len: usize,
) -> PremaStatus {
    guard(|| {
        let m = model_arg(model)?;
        let views = views_arg(m, images, n_views)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dim = m.params.descriptor_dim();
        if out_len < dim {
            return Err((PremaStatus::Validation, format!("output holds {out_len}, descriptor needs {dim}")));
        }
        let e = embed(&m.params, "", &views).map_err(lift)?;
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(e.descriptor.d.data());
        Ok(())
    })
}

/// Like [`prema_embed`] but writes class logits (`num_classes` entries).
///
/// # Safety
/// Same contract as [`prema_embed`].
#[no_mangle]
pub unsafe extern "C" fn prema_classify(
    model: *const PremaModel,
    images: *const f32,
    n_views: usize,
    out: *mut f64,
    out_len: usize,
) -> PremaStatus {
    guard(|| {
        let m = model_arg(model)?;
        let views = views_arg(m, images, n_views)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = m.params.classes();
        if out_len < c {
            return Err((PremaStatus::Validation, format!("output holds {out_len}, logits need {c}")));
        }
        let e = embed(&m.params, "", &views).map_err(lift)?;
        std::slice::from_raw_parts_mut(out, c).copy_from_slice(e.logits.data());
        Ok(())
    })
}

/// Reads a PVWI view image. With `out` null only the dimensions are written;
/// otherwise `out` must hold `height · width` floats.
///
/// # Safety
/// `height` and `width` must be writable; `out` must be null or hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn prema_read_view_image(
    path: *const c_char,
    height: *mut usize,
    width: *mut usize,
    out: *mut f32,
    out_len: usize,
) -> PremaStatus {
    guard(|| {
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        let t = read_view_image(path_arg(path)?).map_err(lift)?;
        let (h, w) = (t.shape()[1], t.shape()[2]);
        *height = h;
        *width = w;
        if out.is_null() {
            return Ok(());
        }
        if out_len < h * w {
            return Err((PremaStatus::Validation, format!("output holds {out_len}, image needs {}", h * w)));
        }
        let dst = std::slice::from_raw_parts_mut(out, h * w);
        dst.iter_mut().zip(t.data()).for_each(|(d, &v)| *d = v as f32);
        Ok(())
    })
}

/// Average precision of a ranked relevance list (nonzero bytes are relevant).
///
/// # Safety
/// `relevant` must hold `len` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prema_average_precision(relevant: *const u8, len: usize, out: *mut f64) -> PremaStatus {
    guard(|| {
        if relevant.is_null() || out.is_null() {
            return Err(null("relevant/out"));
        }
        let flags: Vec<bool> = std::slice::from_raw_parts(relevant, len).iter().map(|&b| b != 0).collect();
        *out = average_precision(&flags)
            .ok_or_else(|| (PremaStatus::Validation, "ranking has no relevant item".to_string()))?;
        Ok(())
    })
}
