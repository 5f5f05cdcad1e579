//! C ABI over the gradient-field, depth-prediction and metric entry points.
//!
//! Every function returns a [`GfpcStatus`]; on failure a description is
//! available from [`gfpc_last_error_message`] on the same thread. Images
//! are interleaved 8-bit RGB, row-major, `height * width * 3` bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gfpc::depth::{predict_depth, DepthNet};
use gfpc::gradfield::{gradient_field, CannyParams, ColorImage};
use gfpc::metrics::{evaluate_pair, DepthView, EvalProtocol};
use gfpc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GfpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Checkpoint = 5,
    Degenerate = 6,
    Internal = 7,
}

impl From<&Error> for GfpcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) | Error::Bounds(_) => GfpcStatus::Dimension,
            Error::Io { .. } | Error::Format { .. } | Error::Ingestion { .. } => GfpcStatus::Io,
            Error::CorruptCheckpoint(_) | Error::DigestMismatch { .. } | Error::Pairing(_) => GfpcStatus::Checkpoint,
            Error::DegenerateProjection | Error::DegenerateSample(_) | Error::DegenerateEvaluation => {
                GfpcStatus::Degenerate
            }
            Error::Config(_) | Error::Input(_) | Error::NonFinite(_) => GfpcStatus::InvalidArgument,
            Error::Contract(_) => GfpcStatus::Internal,
        }
    }
}

/// Canny settings; thresholds are fractions of the maximum magnitude.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GfpcCannyParams {
    pub sigma: f64,
    pub kernel_size: usize,
    pub low: f64,
    pub high: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GfpcMetricReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub pixels: u64,
}

/// Opaque depth network handle.
pub struct GfpcDepthNet {
    net: DepthNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: GfpcStatus, msg: &str) -> GfpcStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), (GfpcStatus, String)>) -> GfpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GfpcStatus::Ok
        }
        Ok(Err((status, msg))) => fail(status, &msg),
        Err(_) => fail(GfpcStatus::Internal, "internal panic"),
    }
}

fn lift(e: Error) -> (GfpcStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (GfpcStatus, String) {
    (GfpcStatus::NullPointer, format!("{what} is null"))
}

/// Copies `height * width * 3` interleaved bytes into a channel-major image.
///
/// # Safety
/// `rgb` must point to at least `height * width * 3` readable bytes.
unsafe fn read_rgb(rgb: *const u8, height: usize, width: usize) -> Result<ColorImage, (GfpcStatus, String)> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    let n = height
        .checked_mul(width)
        .filter(|&n| n > 0 && n.checked_mul(3).is_some())
        .ok_or_else(|| (GfpcStatus::Dimension, format!("invalid image size {height}x{width}")))?;
    let bytes = std::slice::from_raw_parts(rgb, n * 3);
    let mut data = vec![0.0; 3 * n];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = f64::from(px[c]) / 255.0;
        }
    }
    ColorImage::new(3, height, width, data).map_err(lift)
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn gfpc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn gfpc_canny_params_default() -> GfpcCannyParams {
    let d = CannyParams::default();
    GfpcCannyParams { sigma: d.sigma, kernel_size: d.kernel_size, low: d.low, high: d.high }
}

/// Gradient field of an RGB image into `out` (`height * width` floats in
/// `[0,1]`). `params` may be null for the defaults.
///
/// # Safety
/// `rgb` must hold `height * width * 3` bytes, `out` room for
/// `height * width` floats, and `params` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn gfpc_gradient_field(
    rgb: *const u8,
    height: usize,
    width: usize,
    params: *const GfpcCannyParams,
    out: *mut f32,
) -> GfpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let image = read_rgb(rgb, height, width)?;
        let canny = match params.as_ref() {
            Some(p) => CannyParams { sigma: p.sigma, kernel_size: p.kernel_size, low: p.low, high: p.high },
            None => CannyParams::default(),
        };
        let field = gradient_field(&image, &canny).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out, height * width);
        for (d, v) in dst.iter_mut().zip(&field.values) {
            *d = *v as f32;
        }
        Ok(())
    })
}

/// Loads a depth checkpoint into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gfpc_depthnet_load(path: *const c_char, out: *mut *mut GfpcDepthNet) -> GfpcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (GfpcStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let net = DepthNet::load(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(GfpcDepthNet { net }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `net` must be null or a handle from [`gfpc_depthnet_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gfpc_depthnet_free(net: *mut GfpcDepthNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Prediction size for a `height x width` input: half in each dimension.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gfpc_depthnet_output_size(
    net: *const GfpcDepthNet,
    height: usize,
    width: usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> GfpcStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out_height.is_null() || out_width.is_null() {
            return Err(null("output size"));
        }
        let stride = net.net.encoder_config().total_stride();
        if height == 0 || width == 0 || !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
            return Err((GfpcStatus::Dimension, format!("input {height}x{width} must be divisible by {stride}")));
        }
        *out_height = height / 2;
        *out_width = width / 2;
        Ok(())
    })
}

/// Predicts depth in meters into `out` (`(height/2) * (width/2)` floats).
///
/// # Safety
/// `net` must be a live handle, `rgb` must hold `height * width * 3`
/// bytes and `out` room for the prediction.
#[no_mangle]
pub unsafe extern "C" fn gfpc_depthnet_predict(
    net: *const GfpcDepthNet,
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut f32,
) -> GfpcStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let image = read_rgb(rgb, height, width)?;
        let map = predict_depth(&net.net, &image).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out, map.data.len());
        for (d, v) in dst.iter_mut().zip(&map.data) {
            *d = *v as f32;
        }
        Ok(())
    })
}

/// Metrics of one prediction against ground truth, both `height x width`
/// row-major meters. `valid` may be null; `max_depth <= 0` disables the cap.
///
/// # Safety
/// `pred` and `truth` must hold `height * width` doubles, `valid` null or
/// `height * width` bytes, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gfpc_evaluate(
    pred: *const f64,
    truth: *const f64,
    valid: *const u8,
    height: usize,
    width: usize,
    min_depth: f64,
    max_depth: f64,
    out: *mut GfpcMetricReport,
) -> GfpcStatus {
    guard(|| {
        if pred.is_null() || truth.is_null() {
            return Err(null("depth map"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| (GfpcStatus::Dimension, format!("invalid map size {height}x{width}")))?;
        let p = std::slice::from_raw_parts(pred, n);
        let y = std::slice::from_raw_parts(truth, n);
        let mask: Option<Vec<bool>> =
            (!valid.is_null()).then(|| std::slice::from_raw_parts(valid, n).iter().map(|&v| v != 0).collect());
        let protocol =
            EvalProtocol { min_depth, max_depth: (max_depth > 0.0).then_some(max_depth), ..EvalProtocol::default() };
        let r = evaluate_pair(
            DepthView::new(height, width, p).map_err(lift)?,
            DepthView::new(height, width, y).map_err(lift)?,
            mask.as_deref(),
            &protocol,
        )
        .map_err(lift)?;
        *out = GfpcMetricReport {
            delta1: r.delta1,
            delta2: r.delta2,
            delta3: r.delta3,
            rel: r.rel,
            rms: r.rms,
            log10: r.log10,
            pixels: r.pixels,
        };
        Ok(())
    })
}
