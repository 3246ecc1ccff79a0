//! C ABI over the core library: video I/O, M-mode extraction, synthetic
//! generation and the ranking/regression metrics.
//!
//! Conventions: every function returns an `EchomodeStatus`; results come
//! back through out-pointers. Handles (`EchomodeVideo`, `EchomodeStack`)
//! are opaque and must be released with the matching `_free` function.
//! On failure a thread-local message is retrievable via
//! `echomode_last_error`. Passing a null pointer where a value is required
//! yields `NullPointer`; panics are caught and reported as `Internal`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use echomode::data_model::{load_video, VideoTensor};
use echomode::error::Error;
use echomode::mmode::{angle_set, extract_stack, ClipPolicy, MModeStack};
use echomode::synth::{sample_params, synth_video};

/// Status codes returned by every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchomodeStatus {
    Ok = 0,
    Format = 1,
    Shape = 2,
    Manifest = 3,
    Argument = 4,
    Data = 5,
    Checkpoint = 6,
    Io = 7,
    NullPointer = 8,
    InvalidUtf8 = 9,
    /// Metric undefined for the given input (e.g. single-class labels).
    UndefinedMetric = 10,
    /// Unexpected internal failure (caught panic).
    Internal = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> EchomodeStatus {
    match err {
        Error::Format(_) => EchomodeStatus::Format,
        Error::Shape(_) => EchomodeStatus::Shape,
        Error::Manifest(_) => EchomodeStatus::Manifest,
        Error::Argument(_) => EchomodeStatus::Argument,
        Error::Data(_) => EchomodeStatus::Data,
        Error::Checkpoint(_) => EchomodeStatus::Checkpoint,
        Error::Io(_) => EchomodeStatus::Io,
    }
}

fn fail(err: Error) -> EchomodeStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> EchomodeStatus) -> EchomodeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            EchomodeStatus::Internal
        }
    }
}

macro_rules! require {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error(concat!("null pointer: ", stringify!($ptr)));
            return EchomodeStatus::NullPointer;
        }
    };
}

unsafe fn utf8_path<'a>(ptr: *const c_char) -> Result<&'a str, EchomodeStatus> {
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(EchomodeStatus::InvalidUtf8)
        }
    }
}

/// Opaque handle to a loaded B-mode video.
pub struct EchomodeVideo(VideoTensor);

/// Opaque handle to an extracted M-mode stack.
pub struct EchomodeStack(MModeStack);

/// Copy the most recent error message for this thread into `buf`
/// (NUL-terminated, truncated to `len` bytes). Returns the full message
/// length in bytes, excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn echomode_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load an MMV1 video file into a new handle.
#[no_mangle]
pub unsafe extern "C" fn echomode_video_load(
    path: *const c_char,
    out: *mut *mut EchomodeVideo,
) -> EchomodeStatus {
    require!(path);
    require!(out);
    guard(|| {
        let path = match utf8_path(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_video(path) {
            Ok(video) => {
                *out = Box::into_raw(Box::new(EchomodeVideo(video)));
                EchomodeStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Generate a synthetic pulsating-ellipse video with the given target EF.
#[no_mangle]
pub unsafe extern "C" fn echomode_video_synth(
    ef: f64,
    seed: u64,
    frames: u32,
    out: *mut *mut EchomodeVideo,
) -> EchomodeStatus {
    require!(out);
    guard(|| {
        let params = sample_params(seed, 0, (ef, ef));
        match synth_video("ffi", &params, frames as usize) {
            Ok((video, _record)) => {
                *out = Box::into_raw(Box::new(EchomodeVideo(video)));
                EchomodeStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn echomode_video_dims(
    video: *const EchomodeVideo,
    t: *mut u32,
    h: *mut u32,
    w: *mut u32,
) -> EchomodeStatus {
    require!(video);
    require!(t);
    require!(h);
    require!(w);
    let v = &(*video).0;
    *t = v.t as u32;
    *h = v.h as u32;
    *w = v.w as u32;
    EchomodeStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn echomode_video_free(video: *mut EchomodeVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// Scan-line angles in degrees for `m` modes; `out` must hold `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn echomode_angle_set(m: u32, out: *mut f64) -> EchomodeStatus {
    require!(out);
    guard(|| match angle_set(m as usize) {
        Ok(angles) => {
            std::ptr::copy_nonoverlapping(angles.as_ptr(), out, angles.len());
            EchomodeStatus::Ok
        }
        Err(e) => fail(e),
    })
}

/// Extract an M-mode stack: `clip` 0 = full 112-frame clip, 1 = random
/// short clip (32 frames, period 2) drawn from `seed`.
#[no_mangle]
pub unsafe extern "C" fn echomode_stack_extract(
    video: *const EchomodeVideo,
    m: u32,
    clip: u32,
    seed: u64,
    out: *mut *mut EchomodeStack,
) -> EchomodeStatus {
    require!(video);
    require!(out);
    guard(|| {
        let policy = match clip {
            0 => ClipPolicy::Full112,
            1 => ClipPolicy::Short32Period2,
            other => {
                set_error(format!("clip must be 0 (full) or 1 (short), got {other}"));
                return EchomodeStatus::Argument;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match extract_stack(&(*video).0, m as usize, policy, &mut rng) {
            Ok(stack) => {
                *out = Box::into_raw(Box::new(EchomodeStack(stack)));
                EchomodeStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn echomode_stack_dims(
    stack: *const EchomodeStack,
    m: *mut u32,
    s: *mut u32,
    t_clip: *mut u32,
) -> EchomodeStatus {
    require!(stack);
    require!(m);
    require!(s);
    require!(t_clip);
    let st = &(*stack).0;
    *m = st.images.len() as u32;
    *s = st.images[0].s as u32;
    *t_clip = st.images[0].t_clip as u32;
    EchomodeStatus::Ok
}

/// Copy one mode's s*t_clip pixels (row-major, [0,1] intensities) into
/// `out`, which must hold at least s*t_clip floats.
#[no_mangle]
pub unsafe extern "C" fn echomode_stack_pixels(
    stack: *const EchomodeStack,
    mode: u32,
    out: *mut f32,
) -> EchomodeStatus {
    require!(stack);
    require!(out);
    let st = &(*stack).0;
    let Some(img) = st.images.get(mode as usize) else {
        set_error(format!("mode {mode} out of range ({} modes)", st.images.len()));
        return EchomodeStatus::Argument;
    };
    std::ptr::copy_nonoverlapping(img.pixels.as_ptr(), out, img.pixels.len());
    EchomodeStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn echomode_stack_free(stack: *mut EchomodeStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

unsafe fn metric_inputs<'a>(
    values: *const f64,
    labels: *const u8,
    n: usize,
) -> (Vec<f64>, Vec<bool>) {
    let scores = std::slice::from_raw_parts(values, n).to_vec();
    let labels = std::slice::from_raw_parts(labels, n).iter().map(|&b| b != 0).collect();
    (scores, labels)
}

/// Tie-corrected AUROC of `scores` against binary `labels` (nonzero =
/// positive). Single-class labels yield `UndefinedMetric`.
#[no_mangle]
pub unsafe extern "C" fn echomode_auroc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> EchomodeStatus {
    require!(scores);
    require!(labels);
    require!(out);
    guard(|| {
        let (s, l) = metric_inputs(scores, labels, n);
        match echomode::metrics::auroc(&s, &l) {
            Ok(Some(v)) => {
                *out = v;
                EchomodeStatus::Ok
            }
            Ok(None) => {
                set_error("AUROC undefined: labels contain a single class");
                EchomodeStatus::UndefinedMetric
            }
            Err(e) => fail(e),
        }
    })
}

/// Area under the precision-recall curve; same conventions as
/// `echomode_auroc`.
#[no_mangle]
pub unsafe extern "C" fn echomode_auprc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> EchomodeStatus {
    require!(scores);
    require!(labels);
    require!(out);
    guard(|| {
        let (s, l) = metric_inputs(scores, labels, n);
        match echomode::metrics::auprc(&s, &l) {
            Ok(Some(v)) => {
                *out = v;
                EchomodeStatus::Ok
            }
            Ok(None) => {
                set_error("AUPRC undefined: labels contain a single class");
                EchomodeStatus::UndefinedMetric
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn regression_metric(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
    f: impl Fn(&[f64], &[f64]) -> echomode::error::Result<f64>,
) -> EchomodeStatus {
    let p = std::slice::from_raw_parts(pred, n);
    let t = std::slice::from_raw_parts(truth, n);
    match f(p, t) {
        Ok(v) => {
            *out = v;
            EchomodeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn echomode_mae(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
) -> EchomodeStatus {
    require!(pred);
    require!(truth);
    require!(out);
    guard(|| regression_metric(pred, truth, n, out, echomode::metrics::mae))
}

#[no_mangle]
pub unsafe extern "C" fn echomode_rmse(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
) -> EchomodeStatus {
    require!(pred);
    require!(truth);
    require!(out);
    guard(|| regression_metric(pred, truth, n, out, echomode::metrics::rmse))
}

#[no_mangle]
pub unsafe extern "C" fn echomode_r2(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
) -> EchomodeStatus {
    require!(pred);
    require!(truth);
    require!(out);
    guard(|| regression_metric(pred, truth, n, out, echomode::metrics::r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn synth_extract_round_trip() {
        unsafe {
            let mut video: *mut EchomodeVideo = ptr::null_mut();
            assert_eq!(echomode_video_synth(0.4, 7, 112, &mut video), EchomodeStatus::Ok);
            let (mut t, mut h, mut w) = (0u32, 0u32, 0u32);
            assert_eq!(echomode_video_dims(video, &mut t, &mut h, &mut w), EchomodeStatus::Ok);
            assert_eq!((t, h, w), (112, 112, 112));

            let mut stack: *mut EchomodeStack = ptr::null_mut();
            assert_eq!(echomode_stack_extract(video, 4, 0, 0, &mut stack), EchomodeStatus::Ok);
            let (mut m, mut s, mut tc) = (0u32, 0u32, 0u32);
            assert_eq!(echomode_stack_dims(stack, &mut m, &mut s, &mut tc), EchomodeStatus::Ok);
            assert_eq!((m, s, tc), (4, 112, 112));

            let mut pixels = vec![0f32; (s * tc) as usize];
            assert_eq!(echomode_stack_pixels(stack, 0, pixels.as_mut_ptr()), EchomodeStatus::Ok);
            assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(
                echomode_stack_pixels(stack, 9, pixels.as_mut_ptr()),
                EchomodeStatus::Argument
            );

            echomode_stack_free(stack);
            echomode_video_free(video);
        }
    }

    #[test]
    fn angle_set_matches_core() {
        unsafe {
            let mut angles = vec![0f64; 4];
            assert_eq!(echomode_angle_set(4, angles.as_mut_ptr()), EchomodeStatus::Ok);
            assert_eq!(angles, vec![0.0, 45.0, 90.0, 135.0]);
            assert_eq!(echomode_angle_set(0, angles.as_mut_ptr()), EchomodeStatus::Argument);
        }
    }

    #[test]
    fn null_pointers_reported() {
        unsafe {
            let mut out = 0f64;
            assert_eq!(
                echomode_auroc(ptr::null(), ptr::null(), 0, &mut out),
                EchomodeStatus::NullPointer
            );
            let mut video: *mut EchomodeVideo = ptr::null_mut();
            assert_eq!(
                echomode_video_load(ptr::null(), &mut video),
                EchomodeStatus::NullPointer
            );
        }
    }

    #[test]
    fn metrics_and_error_messages() {
        unsafe {
            let scores = [0.5, 0.5, 0.8];
            let labels = [0u8, 1, 1];
            let mut out = 0f64;
            assert_eq!(
                echomode_auroc(scores.as_ptr(), labels.as_ptr(), 3, &mut out),
                EchomodeStatus::Ok
            );
            assert_eq!(out, 0.75);

            let one_class = [1u8, 1, 1];
            assert_eq!(
                echomode_auroc(scores.as_ptr(), one_class.as_ptr(), 3, &mut out),
                EchomodeStatus::UndefinedMetric
            );
            let mut buf = [0i8; 128];
            let len = echomode_last_error(buf.as_mut_ptr() as *mut c_char, buf.len());
            assert!(len > 0);

            let pred = [0.4, 0.5];
            let truth = [0.5, 0.5];
            assert_eq!(echomode_mae(pred.as_ptr(), truth.as_ptr(), 2, &mut out), EchomodeStatus::Ok);
            assert!((out - 0.05).abs() < 1e-12);
            assert_eq!(echomode_rmse(pred.as_ptr(), truth.as_ptr(), 2, &mut out), EchomodeStatus::Ok);
            let mut r2v = 0f64;
            assert_eq!(echomode_r2(pred.as_ptr(), truth.as_ptr(), 2, &mut r2v), EchomodeStatus::Ok);
        }
    }

    #[test]
    fn load_missing_file_maps_to_status() {
        unsafe {
            let path = std::ffi::CString::new("/nonexistent/video.mmv").unwrap();
            let mut video: *mut EchomodeVideo = ptr::null_mut();
            let status = echomode_video_load(path.as_ptr(), &mut video);
            // the loader wraps open failures as format errors
            assert_eq!(status, EchomodeStatus::Format);
            assert!(video.is_null());
        }
    }

    #[test]
    fn header_is_generated() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/echomode.h");
        let text = std::fs::read_to_string(header).expect("header generated at build time");
        for symbol in [
            "echomode_video_load",
            "echomode_stack_extract",
            "echomode_auroc",
            "EchomodeStatus",
        ] {
            assert!(text.contains(symbol), "missing {symbol}");
        }
    }
}
