use std::ffi::{CStr, CString};
use std::ptr;

use nmslab::detector::{save_checkpoint, ArchConfig, Checkpoint, DetectorParams};
use nmslab_ffi::*;

fn last_error() -> String {
    let p = nmslab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn bx(cx: f64, cy: f64, w: f64, score: f64, class_id: u32) -> NmslabBox {
    NmslabBox { cx, cy, w, h: w, score, class_id }
}

#[test]
fn nms_keeps_best_of_overlapping_pair() {
    let boxes = [bx(10.0, 10.0, 10.0, 0.9, 0), bx(11.0, 10.0, 10.0, 0.8, 0), bx(50.0, 50.0, 10.0, 0.7, 0)];
    let mut keep = [usize::MAX; 3];
    let mut len = 0;
    let s = unsafe { nmslab_nms(boxes.as_ptr(), 3, 0.25, 0.5, false, keep.as_mut_ptr(), 3, &mut len) };
    assert_eq!(s, NmslabStatus::Ok);
    assert_eq!(&keep[..len], &[0, 2]);
}

#[test]
fn nms_indices_refer_to_unfiltered_input() {
    let boxes = [bx(10.0, 10.0, 10.0, 0.1, 0), bx(40.0, 40.0, 10.0, 0.9, 0)];
    let mut keep = [0usize; 2];
    let mut len = 0;
    let s = unsafe { nmslab_nms(boxes.as_ptr(), 2, 0.25, 0.5, false, keep.as_mut_ptr(), 2, &mut len) };
    assert_eq!(s, NmslabStatus::Ok);
    assert_eq!(&keep[..len], &[1]);
}

#[test]
fn nms_per_class_spares_other_classes() {
    let boxes = [bx(10.0, 10.0, 10.0, 0.9, 0), bx(10.0, 10.0, 10.0, 0.8, 1)];
    let mut keep = [0usize; 2];
    let mut len = 0;
    unsafe { nmslab_nms(boxes.as_ptr(), 2, 0.25, 0.5, true, keep.as_mut_ptr(), 2, &mut len) };
    assert_eq!(len, 2);
    unsafe { nmslab_nms(boxes.as_ptr(), 2, 0.25, 0.5, false, keep.as_mut_ptr(), 2, &mut len) };
    assert_eq!(len, 1);
}

#[test]
fn nms_reports_small_buffer_and_required_length() {
    let boxes = [bx(10.0, 10.0, 4.0, 0.9, 0), bx(40.0, 40.0, 4.0, 0.9, 0)];
    let mut keep = [0usize; 1];
    let mut len = 0;
    let s = unsafe { nmslab_nms(boxes.as_ptr(), 2, 0.25, 0.5, false, keep.as_mut_ptr(), 1, &mut len) };
    assert_eq!(s, NmslabStatus::BufferTooSmall);
    assert_eq!(len, 2);
}

#[test]
fn nms_rejects_null_and_bad_input() {
    let mut len = 0;
    let s = unsafe { nmslab_nms(ptr::null(), 1, 0.25, 0.5, false, ptr::null_mut(), 0, &mut len) };
    assert_eq!(s, NmslabStatus::NullPointer);
    assert!(last_error().contains("boxes"));
    let boxes = [bx(f64::NAN, 0.0, 1.0, 0.9, 0)];
    let s = unsafe { nmslab_nms(boxes.as_ptr(), 1, 0.25, 0.5, false, ptr::null_mut(), 0, &mut len) };
    assert_eq!(s, NmslabStatus::InvalidArgument);
    let s = unsafe { nmslab_nms(ptr::null(), 0, 0.25, 1.5, false, ptr::null_mut(), 0, &mut len) };
    assert_eq!(s, NmslabStatus::InvalidArgument);
    let s = unsafe { nmslab_nms(ptr::null(), 0, 0.25, 0.5, false, ptr::null_mut(), 0, &mut len) };
    assert_eq!(s, NmslabStatus::Ok);
    assert_eq!(len, 0);
}

#[test]
fn latency_model_predicts_and_solves_capacity() {
    let mut m = ptr::null_mut();
    // 1e-9 s per squared candidate, no linear term, 10 ms backbone.
    let s = unsafe { nmslab_latency_model_new(1.0, 0.0, 1e9, 1.0, 10_000_000, 1.0, &mut m) };
    assert_eq!(s, NmslabStatus::Ok);
    let mut t = 0.0;
    assert_eq!(unsafe { nmslab_latency_model_predict(m, 1000, &mut t) }, NmslabStatus::Ok);
    assert!((t - 1e-3).abs() < 1e-15);
    // 40 ms frame leaves 30 ms: sqrt(0.03 / 1e-9) = 5477.2.
    let mut c = 0;
    assert_eq!(unsafe { nmslab_latency_model_capacity(m, 25.0, &mut c) }, NmslabStatus::Ok);
    assert_eq!(c, 5477);
    // 200 FPS leaves less than the backbone time.
    assert_eq!(unsafe { nmslab_latency_model_capacity(m, 200.0, &mut c) }, NmslabStatus::Infeasible);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { nmslab_latency_model_capacity(m, -1.0, &mut c) }, NmslabStatus::InvalidArgument);
    unsafe { nmslab_latency_model_free(m) };
    unsafe { nmslab_latency_model_free(ptr::null_mut()) };
}

#[test]
fn latency_model_rejects_invalid_parameters() {
    let mut m = ptr::null_mut();
    let s = unsafe { nmslab_latency_model_new(-1.0, 0.0, 1.0, 1.0, 0, 1.0, &mut m) };
    assert_eq!(s, NmslabStatus::InvalidArgument);
    assert!(m.is_null());
}

#[test]
fn latency_model_load_reports_missing_and_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nmslab_latency_model_load(missing.as_ptr(), &mut m) }, NmslabStatus::Io);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, b"{\"alpha\": 1}").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nmslab_latency_model_load(bad.as_ptr(), &mut m) }, NmslabStatus::Format);
}

#[test]
fn detector_round_trip_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let params = DetectorParams::init(ArchConfig::default(), 3).unwrap();
    save_checkpoint(&path, &Checkpoint::new(params.clone(), "test".into())).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { nmslab_detector_load(cpath.as_ptr(), &mut d) }, NmslabStatus::Ok);
    let (mut size, mut k) = (0, 0);
    assert_eq!(unsafe { nmslab_detector_shape(d, &mut size, &mut k) }, NmslabStatus::Ok);
    assert_eq!((size, k), (params.arch.image_size, params.arch.num_classes));

    let pixels: Vec<f64> = (0..size * size * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    let mut out = vec![bx(0.0, 0.0, 0.0, 0.0, 0); 2000];
    let (mut len, mut cand) = (0, 0);
    // A low threshold lets the untrained detector emit candidates.
    let s = unsafe { nmslab_detector_detect(d, pixels.as_ptr(), size, size, 0.0, 0.6, out.as_mut_ptr(), out.len(), &mut len, &mut cand) };
    assert_eq!(s, NmslabStatus::Ok);
    let image = nmslab::detector::Image::from_data(size, size, pixels.clone()).unwrap();
    let cfg = nmslab::nms::NmsConfig { conf_threshold: 0.0, ..Default::default() };
    let (want, count) = nmslab::evalkit::detect(&params, &image, &cfg).unwrap();
    assert_eq!(len, want.len());
    assert_eq!(cand, count);
    for (a, b) in out[..len].iter().zip(&want) {
        assert_eq!((a.cx, a.cy, a.w, a.h, a.score, a.class_id as usize), (b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h, b.score(), b.class_id));
    }

    let s = unsafe { nmslab_detector_detect(d, pixels.as_ptr(), size, size - 1, 0.0, 0.6, out.as_mut_ptr(), out.len(), &mut len, &mut cand) };
    assert_eq!(s, NmslabStatus::InvalidArgument);
    unsafe { nmslab_detector_free(d) };
}

#[test]
fn detector_load_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut d = ptr::null_mut();
    let s = unsafe { nmslab_detector_load(cpath.as_ptr(), &mut d) };
    assert_eq!(s, NmslabStatus::Format);
    assert!(d.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/nmslab.h")).unwrap();
    for f in [
        "nmslab_last_error",
        "nmslab_nms",
        "nmslab_latency_model_new",
        "nmslab_latency_model_load",
        "nmslab_latency_model_predict",
        "nmslab_latency_model_capacity",
        "nmslab_latency_model_free",
        "nmslab_detector_load",
        "nmslab_detector_shape",
        "nmslab_detector_detect",
        "nmslab_detector_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct NmslabDetector NmslabDetector;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"nmslab.h\"\nint main(void) { return NMSLAB_STATUS_OK; }\n").unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc);
        }
    }
    Err(())
}
