//! C interface to a trained latent-vg checkpoint.
//!
//! Every function returns an [`LvgStatus`]; on failure a description is
//! available from [`lvg_last_error`] on the same thread. Models are opaque
//! handles created by [`lvg_model_load`] and released by [`lvg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use latent_vg::checkpoint;
use latent_vg::error::Error;
use latent_vg::metrics;
use latent_vg::model::LatentVg;
use latent_vg::predictor;
use latent_vg::sample::{BoundingBox, Image, Mask};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LvgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    VocabOverflow = 6,
    MissingArtifact = 7,
    Panic = 8,
}

/// Inclusive pixel box.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LvgBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

/// Scalar outputs of one prediction; the mask goes to a caller buffer.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LvgPrediction {
    /// Valid when `has_box` is true.
    pub bbox: LvgBox,
    pub has_box: bool,
    /// Whether the model has a no-target classifier; `empty` and
    /// `empty_logit` are meaningful only then.
    pub has_empty_decision: bool,
    pub empty: bool,
    pub empty_logit: f64,
}

/// A loaded model.
pub struct LvgModel {
    inner: LatentVg,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: LvgStatus, msg: impl Into<String>) -> LvgStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> LvgStatus {
    match e {
        Error::Io(_) => LvgStatus::Io,
        Error::Json(_) | Error::Format { .. } => LvgStatus::Format,
        Error::ShapeMismatch(_) | Error::TextTooLong { .. } => LvgStatus::ShapeMismatch,
        Error::VocabOverflow { .. } => LvgStatus::VocabOverflow,
        Error::MissingArtifact(_) => LvgStatus::MissingArtifact,
        _ => LvgStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), LvgStatus>) -> LvgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LvgStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(LvgStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: latent_vg::error::Result<T>) -> Result<T, LvgStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn to_ffi_box(b: BoundingBox) -> LvgBox {
    LvgBox {
        x_min: b.x_min as u32,
        y_min: b.y_min as u32,
        x_max: b.x_max as u32,
        y_max: b.y_max as u32,
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], LvgStatus> {
    if ptr.is_null() {
        if len == 0 {
            return Ok(&[]);
        }
        return Err(fail(LvgStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn lvg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lvg_model_load(path: *const c_char, out: *mut *mut LvgModel) -> LvgStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(LvgStatus::NullPointer, "path or out is null"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(LvgStatus::InvalidArgument, "path is not UTF-8"))?;
        let (inner, _) = lift(checkpoint::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(LvgModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`lvg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lvg_model_free(model: *mut LvgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image size and vocabulary size the model expects.
///
/// # Safety
/// `model` must be a live handle; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn lvg_model_input_shape(
    model: *const LvgModel,
    height: *mut usize,
    width: *mut usize,
    vocab_size: *mut usize,
) -> LvgStatus {
    guard(|| {
        if model.is_null() || height.is_null() || width.is_null() || vocab_size.is_null() {
            return Err(fail(LvgStatus::NullPointer, "null argument"));
        }
        let cfg = &(*model).inner.config;
        *height = cfg.image_h;
        *width = cfg.image_w;
        *vocab_size = cfg.vocab_size;
        Ok(())
    })
}

/// Segments the referred object.
///
/// `rgb` holds `height * width * 3` interleaved bytes, `tokens` the
/// expression's word ids. The binary mask (0 or 1 per pixel, row-major) is
/// written to `mask_out`, which must hold `height * width` bytes.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lvg_predict(
    model: *const LvgModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    tokens: *const u32,
    n_tokens: usize,
    mask_out: *mut u8,
    mask_len: usize,
    out: *mut LvgPrediction,
) -> LvgStatus {
    guard(|| {
        if model.is_null() || out.is_null() || mask_out.is_null() {
            return Err(fail(LvgStatus::NullPointer, "null argument"));
        }
        let model = &(*model).inner;
        if mask_len != height * width {
            return Err(fail(
                LvgStatus::ShapeMismatch,
                format!("mask buffer of {mask_len} bytes for a {height}x{width} image"),
            ));
        }
        let bytes = slice(rgb, height * width * 3, "rgb")?;
        let tokens: Vec<usize> = slice(tokens, n_tokens, "tokens")?.iter().map(|&t| t as usize).collect();
        let image = lift(Image::from_bytes(height, width, bytes.to_vec()))?;
        let pred = lift(predictor::predict(model, &image, &tokens))?;
        let mask = std::slice::from_raw_parts_mut(mask_out, mask_len);
        for (dst, &on) in mask.iter_mut().zip(pred.mask.data()) {
            *dst = u8::from(on);
        }
        *out = LvgPrediction {
            bbox: pred.bbox.map(to_ffi_box).unwrap_or_default(),
            has_box: pred.bbox.is_some(),
            has_empty_decision: pred.empty_decision.is_some(),
            empty: pred.empty_decision.unwrap_or(false),
            empty_logit: pred.empty_logit.unwrap_or(0.0),
        };
        Ok(())
    })
}

/// # Safety
/// `mask` must hold `height * width` bytes.
unsafe fn read_mask(mask: *const u8, height: usize, width: usize) -> Result<Mask, LvgStatus> {
    let bytes = slice(mask, height * width, "mask")?;
    lift(Mask::from_vec(height, width, bytes.iter().map(|&b| b != 0).collect()))
}

/// Tight box around the nonzero pixels; `*found` is false for an empty mask.
///
/// # Safety
/// `mask` must hold `height * width` bytes; `out` and `found` writable.
#[no_mangle]
pub unsafe extern "C" fn lvg_mask_to_box(
    mask: *const u8,
    height: usize,
    width: usize,
    out: *mut LvgBox,
    found: *mut bool,
) -> LvgStatus {
    guard(|| {
        if out.is_null() || found.is_null() {
            return Err(fail(LvgStatus::NullPointer, "null argument"));
        }
        let m = read_mask(mask, height, width)?;
        let b = predictor::box_from_mask(&m);
        *found = b.is_some();
        *out = b.map(to_ffi_box).unwrap_or_default();
        Ok(())
    })
}

/// Intersection over union of two masks; 1 when both are empty.
///
/// # Safety
/// `a` and `b` must hold `height * width` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lvg_mask_iou(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> LvgStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(LvgStatus::NullPointer, "out is null"));
        }
        let (a, b) = (read_mask(a, height, width)?, read_mask(b, height, width)?);
        *out = lift(metrics::iou(&a, &b))?;
        Ok(())
    })
}
