use std::ffi::CStr;
use std::ptr;

use aploc_ffi::*;

fn model() -> *mut AplocModel {
    let mut m = ptr::null_mut();
    let s = unsafe { aploc_model_new(4, 8, 0.12, 0.09, 0.02, AplocOrientation::Fixed, &mut m) };
    assert_eq!(s, AplocStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = aploc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn dims(m: *const AplocModel) -> (usize, usize) {
    let (mut s, mut p) = (0, 0);
    assert_eq!(unsafe { aploc_model_dims(m, &mut s, &mut p) }, AplocStatus::Ok);
    (s, p)
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(aploc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_dimensions_and_points() {
    let m = model();
    let (s, p) = dims(m);
    assert_eq!(s, 32);
    assert!(p > 100);
    let mut xyz = [0.0; 3];
    assert_eq!(unsafe { aploc_model_point(m, 0, xyz.as_mut_ptr()) }, AplocStatus::Ok);
    assert!(xyz.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.9 * 0.09);
    assert_eq!(unsafe { aploc_model_point(m, p, xyz.as_mut_ptr()) }, AplocStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    unsafe { aploc_model_free(m) };
}

#[test]
fn bad_parameters_report_errors() {
    let mut m = ptr::null_mut();
    let s = unsafe { aploc_model_new(4, 8, 0.05, 0.09, 0.02, AplocOrientation::Fixed, &mut m) };
    assert_eq!(s, AplocStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
    let s = unsafe { aploc_model_new(4, 8, 0.12, 0.09, 0.02, AplocOrientation::Fixed, ptr::null_mut()) };
    assert_eq!(s, AplocStatus::InvalidArgument);
    assert_eq!(unsafe { aploc_model_dims(ptr::null(), ptr::null_mut(), ptr::null_mut()) }, AplocStatus::InvalidArgument);
    unsafe { aploc_model_free(ptr::null_mut()) };
}

#[test]
fn noiseless_pair_localized_by_every_method() {
    let m = model();
    let (n_sensors, _) = dims(m);
    let truth = [10usize, 150];
    let mut topo = vec![vec![0.0; n_sensors]; 2];
    for (t, &g) in topo.iter_mut().zip(&truth) {
        assert_eq!(unsafe { aploc_model_topography(m, g, t.as_mut_ptr()) }, AplocStatus::Ok);
    }
    let n_samples = 40;
    let mut data = vec![0.0; n_sensors * n_samples];
    for i in 0..n_sensors {
        for t in 0..n_samples {
            let s1 = (0.3 * t as f64).sin();
            let s2 = (0.71 * t as f64 + 1.0).cos();
            data[i * n_samples + t] = topo[0][i] * s1 + topo[1][i] * s2;
        }
    }
    for method in [AplocMethod::Ap, AplocMethod::RapMusic, AplocMethod::TrapMusic, AplocMethod::RapBeamformer] {
        let mut idx = [0usize; 2];
        let mut ori = [0.0; 6];
        let s = unsafe { aploc_localize(m, method, data.as_ptr(), n_sensors, n_samples, 2, idx.as_mut_ptr(), ori.as_mut_ptr()) };
        assert_eq!(s, AplocStatus::Ok, "{method:?}");
        idx.sort();
        assert_eq!(idx, truth, "{method:?}");
        for o in ori.chunks(3) {
            assert!((o.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    unsafe { aploc_model_free(m) };
}

#[test]
fn localize_errors_map_to_status() {
    let m = model();
    let mut idx = [0usize; 2];
    let data = vec![1.0; 31 * 10];
    let s = unsafe { aploc_localize(m, AplocMethod::Ap, data.as_ptr(), 31, 10, 2, idx.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, AplocStatus::InvalidArgument);
    assert!(last_error().contains("sensors"));

    let zeros = vec![0.0; 32 * 10];
    let s = unsafe { aploc_localize(m, AplocMethod::RapMusic, zeros.as_ptr(), 32, 10, 2, idx.as_mut_ptr(), ptr::null_mut()) };
    assert_ne!(s, AplocStatus::Ok);

    let s = unsafe { aploc_localize(m, AplocMethod::Ap, ptr::null(), 32, 10, 2, idx.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, AplocStatus::InvalidArgument);
    unsafe { aploc_model_free(m) };
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/aploc.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["aploc_model_new", "aploc_model_free", "aploc_localize", "aploc_last_error", "typedef struct AplocModel AplocModel"] {
        assert!(text.contains(f), "{f}");
    }
    match std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c", header]).status() {
        Ok(s) => assert!(s.success()),
        Err(_) => eprintln!("no C compiler; skipped syntax check"),
    }
}
