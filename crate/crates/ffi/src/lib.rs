//! C ABI over `lfr-core`.
//!
//! Every fallible call returns an [`LfrStatus`]; on failure the message is
//! kept per thread and read back with [`lfr_last_error_message`]. Handles are
//! opaque and released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lfr_core::checkpoint::Checkpoint;
use lfr_core::image::{DepthMap, Image};
use lfr_core::losses::{eval_metrics, DepthCaps};
use lfr_core::model::Model;
use lfr_core::train::model_from_checkpoint;
use lfr_core::{analysis, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LfrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Config = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

impl From<&Error> for LfrStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => LfrStatus::Io,
            Error::Format(_) | Error::Json(_) => LfrStatus::Format,
            Error::Config(_) => LfrStatus::Config,
            Error::Dimension { .. } => LfrStatus::InvalidArgument,
            _ => LfrStatus::Numeric,
        }
    }
}

/// Evaluation metrics of one depth map.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LfrMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: u64,
}

/// A trained model loaded from a checkpoint.
pub struct LfrModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: LfrStatus, msg: impl Into<String>) -> LfrStatus {
    set_error(msg);
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), LfrStatus>>(f: F) -> LfrStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LfrStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(LfrStatus::Panic, "internal panic"),
    }
}

fn core(e: Error) -> LfrStatus {
    let s = LfrStatus::from(&e);
    fail(s, e.to_string())
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], LfrStatus> {
    if ptr.is_null() {
        return Err(fail(LfrStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], LfrStatus> {
    if ptr.is_null() {
        return Err(fail(LfrStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model_ref<'a>(model: *const LfrModel) -> Result<&'a Model, LfrStatus> {
    model
        .as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(LfrStatus::NullPointer, "model is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lfr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// excluding the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lfr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lfr_model_load(path: *const c_char, out: *mut *mut LfrModel) -> LfrStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(LfrStatus::NullPointer, "path or out is null"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(LfrStatus::InvalidArgument, "path is not UTF-8"))?;
        let ck = Checkpoint::load(&PathBuf::from(p)).map_err(core)?;
        let inner = model_from_checkpoint(&ck).map_err(core)?;
        *out = Box::into_raw(Box::new(LfrModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`lfr_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lfr_model_free(model: *mut LfrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input size, backbone depth and number of head levels.
///
/// # Safety
/// `model` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn lfr_model_shape(
    model: *const LfrModel,
    height: *mut usize,
    width: *mut usize,
    layers: *mut usize,
    levels: *mut usize,
) -> LfrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let b = &m.cfg.backbone;
        for (p, v) in [(height, b.image_height), (width, b.image_width), (layers, b.depth), (levels, m.cfg.k)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Predicts depth for one interleaved RGB image (`height·width·3` floats in
/// `[0, 1]`). Writes `height·width` depths, `levels` level weights and
/// `levels` selected layer indices; the last two outputs may be null.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn lfr_model_predict(
    model: *const LfrModel,
    rgb: *const f32,
    rgb_len: usize,
    depth_out: *mut f32,
    depth_len: usize,
    weights_out: *mut f64,
    selected_out: *mut u32,
    levels: usize,
) -> LfrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (h, w) = (m.cfg.backbone.image_height, m.cfg.backbone.image_width);
        if rgb_len != h * w * 3 {
            return Err(fail(LfrStatus::InvalidArgument, format!("rgb length {rgb_len}, expected {}", h * w * 3)));
        }
        if depth_len < h * w || ((!weights_out.is_null() || !selected_out.is_null()) && levels < m.cfg.k) {
            return Err(fail(LfrStatus::BufferTooSmall, "output buffer too small"));
        }
        let rgb = slice(rgb, rgb_len, "rgb")?;
        let image = Image::new(h, w, rgb.iter().map(|&v| v as f64).collect()).map_err(core)?;
        let pred = m.predict(&image).map_err(core)?;
        for (o, d) in slice_mut(depth_out, h * w, "depth_out")?.iter_mut().zip(&pred.depth) {
            *o = *d as f32;
        }
        if !weights_out.is_null() {
            std::slice::from_raw_parts_mut(weights_out, m.cfg.k).copy_from_slice(&pred.level_weights);
        }
        if !selected_out.is_null() {
            let out = std::slice::from_raw_parts_mut(selected_out, m.cfg.k);
            for (o, s) in out.iter_mut().zip(&pred.selected) {
                *o = *s as u32;
            }
        }
        Ok(())
    })
}

/// Depth metrics of `pred` against `gt` (both `height·width`); `gt` entries
/// that are not finite and positive are treated as invalid.
///
/// # Safety
/// `pred` and `gt` must hold `height·width` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lfr_eval_metrics(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    min_depth: f64,
    max_depth: f64,
    out: *mut LfrMetrics,
) -> LfrStatus {
    guard(|| {
        let n = height * width;
        let pred = slice(pred, n, "pred")?;
        let gt = slice(gt, n, "gt")?;
        if out.is_null() {
            return Err(fail(LfrStatus::NullPointer, "out is null"));
        }
        let valid = gt.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let gt_map = DepthMap::with_mask(height, width, gt.to_vec(), valid).map_err(core)?;
        let r = eval_metrics(pred, &gt_map, DepthCaps { min_depth, max_depth }).map_err(core)?;
        *out = LfrMetrics {
            abs_rel: r.abs_rel,
            sq_rel: r.sq_rel,
            rmse: r.rmse,
            rmse_log: r.rmse_log,
            log10: r.log10,
            silog: r.silog,
            delta1: r.delta1,
            delta2: r.delta2,
            delta3: r.delta3,
            valid_pixels: r.valid_pixel_count as u64,
        };
        Ok(())
    })
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `x` and `y` must hold `len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lfr_spearman(x: *const f64, y: *const f64, len: usize, out: *mut f64) -> LfrStatus {
    guard(|| {
        let (x, y) = (slice(x, len, "x")?, slice(y, len, "y")?);
        if out.is_null() {
            return Err(fail(LfrStatus::NullPointer, "out is null"));
        }
        *out = analysis::spearman_rho(x, y).map_err(core)?;
        Ok(())
    })
}

/// One minus the Pearson correlation.
///
/// # Safety
/// `x` and `y` must hold `len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lfr_pearson_distance(x: *const f64, y: *const f64, len: usize, out: *mut f64) -> LfrStatus {
    guard(|| {
        let (x, y) = (slice(x, len, "x")?, slice(y, len, "y")?);
        if out.is_null() {
            return Err(fail(LfrStatus::NullPointer, "out is null"));
        }
        *out = analysis::pearson_distance(x, y).map_err(core)?;
        Ok(())
    })
}
