use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use ntk_limits::dcnn::DcnnSpec;
use ntk_limits_ffi::*;

fn last_error() -> String {
    let p = ntk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn from_json(json: &str) -> Result<*mut NtkNonlinearity, NtkStatus> {
    let c = CString::new(json).unwrap();
    let mut out = ptr::null_mut();
    match unsafe { ntk_nonlinearity_from_json(c.as_ptr(), &mut out) } {
        NtkStatus::Ok => Ok(out),
        s => Err(s),
    }
}

#[test]
fn duals_and_regimes() {
    let s = ntk_nonlinearity_standardized_relu();
    let mut v = 0.0;
    unsafe {
        assert_eq!(ntk_dual(s, 0.0, &mut v), NtkStatus::Ok);
        assert!((v - 1.0 / std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(ntk_dual_derivative(s, 0.0, &mut v), NtkStatus::Ok);
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(ntk_characteristic_value(s, 0.1, &mut v), NtkStatus::Ok);
        assert!((v - 0.99).abs() < 1e-12);
        let (mut reg, mut r, mut a) = (NtkRegime::Chaos, 0.0, 0.0);
        assert_eq!(ntk_classify(s, 0.5, &mut reg, &mut r, &mut a), NtkStatus::Ok);
        assert_eq!(reg, NtkRegime::Order);
        assert!((r - 0.75).abs() < 1e-12);
        ntk_nonlinearity_free(s);
    }
    let n = from_json(r#"{"kind": "relu", "normalization": "normalized"}"#).unwrap();
    unsafe {
        let (mut reg, mut r, mut a) = (NtkRegime::Order, 0.0, 0.0);
        assert_eq!(ntk_classify(n, 0.1, &mut reg, &mut r, &mut a), NtkStatus::Ok);
        assert_eq!(reg, NtkRegime::Chaos);
        assert!(a.is_finite() && a < 1.0);
        ntk_nonlinearity_free(n);
    }
}

#[test]
fn fc_kernels() {
    let s = ntk_nonlinearity_standardized_relu();
    let r: f64 = 0.75;
    let mut v = 0.0;
    unsafe {
        for depth in [1usize, 4, 20] {
            assert_eq!(ntk_fc_ntk(s, 0.5, depth, 1.0, &mut v), NtkStatus::Ok);
            assert!((v - (1.0 - r.powi(depth as i32)) / (1.0 - r)).abs() < 1e-10);
        }
        assert_eq!(ntk_fc_normalized_ntk(s, 0.5, 6, 1.0, &mut v), NtkStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(ntk_fc_activation_kernel(s, 0.5, 3, 1, 0.3, &mut v), NtkStatus::Ok);
        assert!((v - (0.25 + 0.75 * 0.3)).abs() < 1e-12);
        ntk_nonlinearity_free(s);
    }
}

#[test]
fn checkerboard_buffer_protocol() {
    let s = ntk_nonlinearity_standardized_relu();
    let mut buf = [0.0; 8];
    let mut n = 0usize;
    unsafe {
        assert_eq!(
            ntk_checkerboard_ntk(s, 0.5, 3, buf.as_mut_ptr(), 2, &mut n),
            NtkStatus::BufferTooSmall
        );
        assert_eq!(n, 4);
        assert!(last_error().contains("need 4"));
        assert_eq!(ntk_checkerboard_ntk(s, 0.5, 3, buf.as_mut_ptr(), buf.len(), &mut n), NtkStatus::Ok);
        assert!(ntk_last_error().is_null());
        assert_eq!(buf[0], 0.25);
        assert!((buf[3] - (1.0 - 0.75f64.powi(3)) / 0.25).abs() < 1e-12);
        ntk_nonlinearity_free(s);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let s = ntk_nonlinearity_standardized_relu();
    let mut v = 0.0;
    unsafe {
        assert_eq!(ntk_dual(s, 1.5, &mut v), NtkStatus::Domain);
        assert!(!last_error().is_empty());
        assert_eq!(ntk_characteristic_value(s, 2.0, &mut v), NtkStatus::Domain);
        assert_eq!(ntk_dual(ptr::null(), 0.0, &mut v), NtkStatus::NullPointer);
        assert!(last_error().contains("sigma"));
        assert_eq!(ntk_dual(s, 0.0, ptr::null_mut()), NtkStatus::NullPointer);
        ntk_nonlinearity_free(s);
        ntk_nonlinearity_free(ptr::null_mut());
    }
    assert_eq!(from_json("{").unwrap_err(), NtkStatus::Json);
    assert_eq!(from_json(r#"{"kind": "hermite-series", "coefficients": []}"#).unwrap_err(), NtkStatus::Config);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ntk_nonlinearity_from_json(ptr::null(), &mut out) }, NtkStatus::NullPointer);
    let bad = [0xffu8, 0];
    assert_eq!(
        unsafe { ntk_nonlinearity_from_json(bad.as_ptr().cast(), &mut out) },
        NtkStatus::InvalidUtf8
    );
}

#[test]
fn graph_handles() {
    let spec = DcnnSpec::new(vec![2], vec![2], 2).unwrap();
    let g = spec.build_borderless(&[[0, 0, 0], [1, 0, 0]]).unwrap();
    let json = CString::new(g.to_json().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(ntk_graph_from_json(json.as_ptr(), &mut h), NtkStatus::Ok);
        let (mut depth, mut bad) = (0usize, 99usize);
        assert_eq!(ntk_graph_depth(h, &mut depth), NtkStatus::Ok);
        assert_eq!(depth, 2);
        assert_eq!(ntk_graph_validate(h, &mut bad), NtkStatus::Ok);
        assert_eq!(bad, 0);
        ntk_graph_free(h);
        let junk = CString::new("[1, 2]").unwrap();
        assert_ne!(ntk_graph_from_json(junk.as_ptr(), &mut h), NtkStatus::Ok);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ntk_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Directory holding the shared library built alongside this test.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap().to_path_buf();
    [deps.clone(), deps.parent().unwrap().to_path_buf()]
        .into_iter()
        .find(|d| d.join("libntk_limits_ffi.so").exists() || d.join("libntk_limits_ffi.dylib").exists())
        .expect("shared library next to the test binary")
}

#[test]
fn c_program_links_against_the_header() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/ntk_limits.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["ntk_dual", "ntk_fc_ntk", "ntk_checkerboard_ntk", "ntk_graph_validate", "NTK_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <math.h>
#include <stdio.h>
#include "ntk_limits.h"
int main(void) {
    NtkNonlinearity *s = ntk_nonlinearity_standardized_relu();
    double v = 0.0;
    if (ntk_fc_ntk(s, 0.5, 3, 1.0, &v) != NTK_STATUS_OK) return 1;
    if (fabs(v - 2.3125) > 1e-12) return 2;
    if (ntk_dual(s, 2.0, &v) != NTK_STATUS_DOMAIN) return 3;
    if (ntk_last_error() == NULL) return 4;
    ntk_nonlinearity_free(s);
    printf("ok %s\n", ntk_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let lib = lib_dir();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let st = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg("-L")
        .arg(&lib)
        .args(["-lntk_limits_ffi", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler");
    assert!(st.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
