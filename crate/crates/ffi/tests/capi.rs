use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use epictrl_ffi::*;

// beta, gamma, rho, sigma, xi, lambda, phi, tau, nu
const THETA: [f64; 9] = [0.35, 0.1, 0.05, 0.04, 0.02, 0.0167, 0.1429, 0.3, 0.01];
const X0: [f64; 6] = [0.999, 0.0005, 0.0005, 0.0, 0.0, 0.0];

fn last_error() -> String {
    unsafe { CStr::from_ptr(epictrl_last_error()) }.to_string_lossy().into_owned()
}

fn model() -> *mut EpictrlModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { epictrl_model_sidher(THETA.as_ptr(), &mut m) }, EpictrlStatus::Ok);
    m
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/epictrl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "epictrl_version",
        "epictrl_last_error",
        "epictrl_model_sidher",
        "epictrl_model_simulate",
        "epictrl_dataset_generate",
        "epictrl_observer_design",
        "epictrl_pipeline_run",
        "typedef struct EpictrlModel EpictrlModel",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(epictrl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_dims_rhs_and_conservation() {
    let m = model();
    let (mut nx, mut nu, mut ny) = (0, 0, 0);
    assert_eq!(unsafe { epictrl_model_dims(m, &mut nx, &mut nu, &mut ny) }, EpictrlStatus::Ok);
    assert_eq!((nx, nu, ny), (6, 4, 10));
    let mut dx = [0.0; 6];
    let u = [0.5, 0.9, 0.4, 0.35];
    assert_eq!(unsafe { epictrl_model_rhs(m, X0.as_ptr(), u.as_ptr(), dx.as_mut_ptr()) }, EpictrlStatus::Ok);
    assert!(dx.iter().sum::<f64>().abs() < 1e-15);

    let times = [0.0, 10.0, 30.0];
    let mut states = [0.0; 18];
    let s = unsafe { epictrl_model_simulate(m, X0.as_ptr(), times.as_ptr(), 3, states.as_mut_ptr()) };
    assert_eq!(s, EpictrlStatus::Ok);
    for row in states.chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    unsafe { epictrl_model_free(m) };
}

#[test]
fn invalid_parameters_are_rejected_with_message() {
    let mut theta = THETA;
    theta[2] = -1.0;
    let mut m = ptr::null_mut();
    let s = unsafe { epictrl_model_sidher(theta.as_ptr(), &mut m) };
    assert_eq!(s, EpictrlStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("rho"), "{}", last_error());
}

#[test]
fn null_handles_are_rejected() {
    let mut dx = [0.0; 6];
    let s = unsafe { epictrl_model_rhs(ptr::null(), X0.as_ptr(), X0.as_ptr(), dx.as_mut_ptr()) };
    assert_eq!(s, EpictrlStatus::NullPointer);
    assert_eq!(unsafe { epictrl_dataset_len(ptr::null()) }, 0);
    unsafe {
        epictrl_model_free(ptr::null_mut());
        epictrl_dataset_free(ptr::null_mut());
        epictrl_observer_free(ptr::null_mut());
        epictrl_string_free(ptr::null_mut());
    }
}

#[test]
fn dataset_csv_roundtrip_and_exact_rates() {
    let m = model();
    let mut d = ptr::null_mut();
    let s = unsafe { epictrl_dataset_generate(m, X0.as_ptr(), 0.0, 30.0, 0.1, 0.0, 0.0, 1, &mut d) };
    assert_eq!(s, EpictrlStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { epictrl_dataset_len(d) }, 301);

    let mut rates = [0.0; 4];
    assert_eq!(unsafe { epictrl_closed_form_rates(d, rates.as_mut_ptr()) }, EpictrlStatus::Ok);
    for (r, t) in rates.iter().zip([THETA[2], THETA[6], THETA[3], THETA[4]]) {
        assert!((r - t).abs() <= 1e-9, "{r} vs {t}");
    }

    let mut text = ptr::null_mut();
    assert_eq!(unsafe { epictrl_dataset_to_csv(d, &mut text) }, EpictrlStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { epictrl_dataset_from_csv(text, &mut back) }, EpictrlStatus::Ok);
    assert_eq!(unsafe { epictrl_dataset_len(back) }, 301);

    let bad = CString::new("t,u1\n0,abc\n").unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { epictrl_dataset_from_csv(bad.as_ptr(), &mut none) },
        EpictrlStatus::InvalidArgument
    );
    unsafe {
        epictrl_string_free(text);
        epictrl_dataset_free(back);
        epictrl_dataset_free(d);
        epictrl_model_free(m);
    }
}

#[test]
fn observer_design_and_run_track_the_truth() {
    let m = model();
    let mut d = ptr::null_mut();
    assert_eq!(
        unsafe { epictrl_dataset_generate(m, X0.as_ptr(), 0.0, 20.0, 0.1, 0.0, 0.0, 1, &mut d) },
        EpictrlStatus::Ok
    );
    let mut obs = ptr::null_mut();
    let s = unsafe { epictrl_observer_design(m, -1.0, 1e-6, 1e-7, &mut obs) };
    assert_eq!(s, EpictrlStatus::Ok, "{}", last_error());
    let mut l = [0.0; 60];
    assert_eq!(unsafe { epictrl_observer_gain_l(obs, l.as_mut_ptr()) }, EpictrlStatus::Ok);
    assert!(l.iter().all(|v| v.is_finite()));

    let xhat0 = [0.9, 0.05, 0.01, 0.01, 0.01, 0.02];
    let mut xf = [0.0; 6];
    assert_eq!(
        unsafe { epictrl_observer_run(obs, d, xhat0.as_ptr(), xf.as_mut_ptr()) },
        EpictrlStatus::Ok
    );
    let mut truth = [0.0; 12];
    let times = [0.0, 20.0];
    unsafe { epictrl_model_simulate(m, X0.as_ptr(), times.as_ptr(), 2, truth.as_mut_ptr()) };
    let err: f64 = xf.iter().zip(&truth[6..]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err < 1e-2, "terminal error {err}");
    unsafe {
        epictrl_observer_free(obs);
        epictrl_dataset_free(d);
        epictrl_model_free(m);
    }
}

#[test]
fn pipeline_reports_cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut code = -1;
    let cfg = CString::new(r#"{"data": {"t1": 0.0}}"#).unwrap();
    assert_eq!(unsafe { epictrl_pipeline_run(cfg.as_ptr(), out.as_ptr(), &mut code) }, EpictrlStatus::Ok);
    assert_eq!(code, 2);
    assert!(!last_error().is_empty());

    let cfg = CString::new(r#"{"unknown": 1}"#).unwrap();
    unsafe { epictrl_pipeline_run(cfg.as_ptr(), out.as_ptr(), &mut code) };
    assert_eq!(code, 2);
}
