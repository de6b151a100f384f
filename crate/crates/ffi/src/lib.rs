//! C ABI over the nmslab core.
//!
//! Every function returns an [`NmslabStatus`]; results go through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`nmslab_last_error`]. Handles are opaque and must be released with their
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use nmslab::detector::{load_checkpoint, DetectorParams, Image};
use nmslab::error::LabError;
use nmslab::evalkit::detect;
use nmslab::geometry::{BBox, Detection};
use nmslab::latency::{budget_from_fps, capacity, LatencyModelFile, TwoTermModel};
use nmslab::nms::{nms_indices, NmsConfig};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmslabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The request has no solution (budget below backbone time, ...).
    Infeasible = 3,
    Io = 4,
    Format = 5,
    /// Output buffer too small; the required length was still written.
    BufferTooSmall = 6,
    Internal = 7,
}

impl From<&LabError> for NmslabStatus {
    fn from(e: &LabError) -> Self {
        match e {
            LabError::BudgetInfeasible { .. } | LabError::CapacityUnreachable { .. } => NmslabStatus::Infeasible,
            LabError::Io { .. } => NmslabStatus::Io,
            LabError::Format { .. } => NmslabStatus::Format,
            LabError::Config(_) | LabError::Precondition(_) | LabError::Shape { .. } | LabError::FitDegenerate(_) => {
                NmslabStatus::InvalidArgument
            }
            LabError::Diverged { .. } => NmslabStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn fail(status: NmslabStatus, msg: impl Into<String>) -> NmslabStatus {
    set_error(msg);
    status
}

fn lab(e: LabError) -> NmslabStatus {
    let status = NmslabStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, turning a panic into `Internal`.
fn guard(f: impl FnOnce() -> NmslabStatus) -> NmslabStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NmslabStatus::Internal, "internal panic"),
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(NmslabStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nmslab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, NmslabStatus> {
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(NmslabStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Axis-aligned box with score, in pixel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmslabBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_id: u32,
}

/// Greedy NMS over `n` boxes. Boxes scoring below `conf_threshold` are
/// dropped first. Writes indices of kept boxes, highest score first, into
/// `keep` (capacity `keep_cap`) and their number into `keep_len`.
///
/// # Safety
/// `boxes` must point to `n` boxes and `keep` to `keep_cap` writable slots.
#[no_mangle]
pub unsafe extern "C" fn nmslab_nms(
    boxes: *const NmslabBox,
    n: usize,
    conf_threshold: f64,
    iou_threshold: f64,
    per_class: bool,
    keep: *mut usize,
    keep_cap: usize,
    keep_len: *mut usize,
) -> NmslabStatus {
    guard(|| {
        non_null!(keep_len);
        if n > 0 {
            non_null!(boxes);
        }
        if !(0.0..=1.0).contains(&iou_threshold) || !conf_threshold.is_finite() {
            return fail(NmslabStatus::InvalidArgument, "thresholds out of range");
        }
        let input = if n == 0 { &[][..] } else { std::slice::from_raw_parts(boxes, n) };
        let mut dets = Vec::new();
        let mut origin = Vec::new();
        for (i, b) in input.iter().enumerate() {
            if ![b.cx, b.cy, b.w, b.h, b.score].iter().all(|v| v.is_finite()) || b.w < 0.0 || b.h < 0.0 {
                return fail(NmslabStatus::InvalidArgument, format!("box {i} is not finite or has negative extent"));
            }
            if b.score < conf_threshold {
                continue;
            }
            let k = b.class_id as usize;
            let mut scores = vec![0.0; k + 1];
            scores[k] = 1.0;
            let mut d = Detection::new(BBox::new(b.cx, b.cy, b.w, b.h), b.score, scores);
            d.class_id = k;
            dets.push(d);
            origin.push(i);
        }
        let cfg = NmsConfig { conf_threshold, iou_threshold, max_detections: None, per_class };
        let (kept, _) = nms_indices(&dets, &cfg);
        *keep_len = kept.len();
        if kept.len() > keep_cap {
            return fail(NmslabStatus::BufferTooSmall, format!("{} indices do not fit {keep_cap} slots", kept.len()));
        }
        if !kept.is_empty() {
            non_null!(keep);
            for (j, &i) in kept.iter().enumerate() {
                *keep.add(j) = origin[i];
            }
        }
        NmslabStatus::Ok
    })
}

/// Opaque latency model.
pub struct NmslabLatencyModel {
    model: TwoTermModel,
}

/// Builds a latency model from its coefficients. `count_scale` maps a
/// candidate count onto the workload it stands for (1 = as measured).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn nmslab_latency_model_new(
    alpha: f64,
    beta: f64,
    s_iou: f64,
    b: f64,
    t_backbone_ns: u64,
    count_scale: f64,
    out: *mut *mut NmslabLatencyModel,
) -> NmslabStatus {
    guard(|| {
        non_null!(out);
        let model = TwoTermModel { count_scale, ..TwoTermModel::new(alpha, beta, s_iou, b, t_backbone_ns) };
        if let Err(e) = model.validate() {
            return lab(e);
        }
        *out = Box::into_raw(Box::new(NmslabLatencyModel { model }));
        NmslabStatus::Ok
    })
}

/// Loads a model written by `nmslab fit-latency`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nmslab_latency_model_load(path: *const c_char, out: *mut *mut NmslabLatencyModel) -> NmslabStatus {
    guard(|| {
        non_null!(path, out);
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bytes = match nmslab::fileio::read_file(p) {
            Ok(b) => b,
            Err(e) => return lab(e),
        };
        let file: LatencyModelFile = match serde_json::from_slice(&bytes) {
            Ok(f) => f,
            Err(e) => return fail(NmslabStatus::Format, format!("{}: {e}", p.display())),
        };
        let model = file.two_term();
        if let Err(e) = model.validate() {
            return lab(e);
        }
        *out = Box::into_raw(Box::new(NmslabLatencyModel { model }));
        NmslabStatus::Ok
    })
}

/// Predicted NMS time in seconds for `count` candidates.
///
/// # Safety
/// `model` must come from a `nmslab_latency_model_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn nmslab_latency_model_predict(
    model: *const NmslabLatencyModel,
    count: u64,
    seconds: *mut f64,
) -> NmslabStatus {
    guard(|| {
        non_null!(model, seconds);
        *seconds = (*model).model.predict_secs(count as f64);
        NmslabStatus::Ok
    })
}

/// Largest candidate count whose predicted NMS time fits the frame budget
/// of `fps` after the backbone. `Infeasible` when the backbone alone
/// exceeds the budget.
///
/// # Safety
/// `model` must come from a `nmslab_latency_model_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn nmslab_latency_model_capacity(
    model: *const NmslabLatencyModel,
    fps: f64,
    c_max: *mut u64,
) -> NmslabStatus {
    guard(|| {
        non_null!(model, c_max);
        if !(fps > 0.0 && fps.is_finite()) {
            return fail(NmslabStatus::InvalidArgument, format!("fps must be positive, got {fps}"));
        }
        match capacity(&(*model).model, budget_from_fps(fps)) {
            Ok(r) => {
                *c_max = r.c_max;
                NmslabStatus::Ok
            }
            Err(e) => lab(e),
        }
    })
}

/// # Safety
/// `model` must be null or come from a constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nmslab_latency_model_free(model: *mut NmslabLatencyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Opaque trained detector.
pub struct NmslabDetector {
    params: DetectorParams,
}

/// Loads a checkpoint written by `nmslab train` or `nmslab defend`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nmslab_detector_load(path: *const c_char, out: *mut *mut NmslabDetector) -> NmslabStatus {
    guard(|| {
        non_null!(path, out);
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(p) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(NmslabDetector { params: ck.params }));
                NmslabStatus::Ok
            }
            Err(e) => lab(e),
        }
    })
}

/// Side length of the square input and number of classes.
///
/// # Safety
/// `det` must come from `nmslab_detector_load`.
#[no_mangle]
pub unsafe extern "C" fn nmslab_detector_shape(
    det: *const NmslabDetector,
    image_size: *mut usize,
    num_classes: *mut usize,
) -> NmslabStatus {
    guard(|| {
        non_null!(det, image_size, num_classes);
        *image_size = (*det).params.arch.image_size;
        *num_classes = (*det).params.arch.num_classes;
        NmslabStatus::Ok
    })
}

/// Detects objects in an HWC RGB image with values in [0, 1]. Writes up to
/// `cap` detections, highest score first, the number of detections to
/// `len`, and the number of candidates that passed the confidence filter to
/// `candidates`.
///
/// # Safety
/// `pixels` must point to `height * width * 3` values and `out` to `cap`
/// writable boxes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn nmslab_detector_detect(
    det: *const NmslabDetector,
    pixels: *const f64,
    height: usize,
    width: usize,
    conf_threshold: f64,
    iou_threshold: f64,
    out: *mut NmslabBox,
    cap: usize,
    len: *mut usize,
    candidates: *mut usize,
) -> NmslabStatus {
    guard(|| {
        non_null!(det, pixels, len, candidates);
        let n = height.saturating_mul(width).saturating_mul(3);
        let image = match Image::from_data(height, width, std::slice::from_raw_parts(pixels, n).to_vec()) {
            Ok(i) => i,
            Err(e) => return lab(e),
        };
        if !(0.0..=1.0).contains(&iou_threshold) || !conf_threshold.is_finite() {
            return fail(NmslabStatus::InvalidArgument, "thresholds out of range");
        }
        let cfg = NmsConfig { conf_threshold, iou_threshold, ..NmsConfig::default() };
        let (dets, count) = match detect(&(*det).params, &image, &cfg) {
            Ok(r) => r,
            Err(e) => return lab(e),
        };
        *len = dets.len();
        *candidates = count;
        if dets.len() > cap {
            return fail(NmslabStatus::BufferTooSmall, format!("{} detections do not fit {cap} slots", dets.len()));
        }
        if !dets.is_empty() {
            non_null!(out);
        }
        for (j, d) in dets.iter().enumerate() {
            *out.add(j) = NmslabBox {
                cx: d.bbox.cx,
                cy: d.bbox.cy,
                w: d.bbox.w,
                h: d.bbox.h,
                score: d.score(),
                class_id: d.class_id as u32,
            };
        }
        NmslabStatus::Ok
    })
}

/// # Safety
/// `det` must be null or come from `nmslab_detector_load` and not be freed
/// twice.
#[no_mangle]
pub unsafe extern "C" fn nmslab_detector_free(det: *mut NmslabDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}
