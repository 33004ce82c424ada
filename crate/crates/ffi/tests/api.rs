use std::ffi::{c_char, CStr, CString};
use std::ptr;

use flexo_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let len = unsafe { flexo_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(text.len(), len.min(511));
    text
}

fn one_user() -> *mut FlexoProblem {
    let mut p = ptr::null_mut();
    let status = unsafe {
        flexo_problem_new(1, 0.001, 0.01, [1.0].as_ptr(), [20.0].as_ptr(), 4.0, 0, ptr::null(), ptr::null(), &mut p)
    };
    assert_eq!(status, FlexoStatus::Ok);
    p
}

#[test]
fn robust_solve_through_the_c_abi() {
    let p = one_user();
    assert_eq!(unsafe { flexo_problem_users(p) }, 1);
    let (mut x, mut beta) = ([0.0], [0.0]);
    assert_eq!(unsafe { flexo_robust_solve(p, 1, x.as_mut_ptr(), beta.as_mut_ptr()) }, FlexoStatus::Ok);
    assert!((x[0] - 20.0).abs() < 1e-3 && (beta[0] - 2.0).abs() < 1e-3);

    let (mut feasible, mut margin) = (-1, f64::NAN);
    let status = unsafe { flexo_check_decision(p, 1, x.as_ptr(), beta.as_ptr(), &mut feasible, &mut margin) };
    assert_eq!(status, FlexoStatus::Ok);
    assert_eq!(feasible, 1);
    let wide = [3.0];
    unsafe { flexo_check_decision(p, 1, x.as_ptr(), wide.as_ptr(), &mut feasible, &mut margin) };
    assert_eq!(feasible, 0);
    assert!(margin > 0.0);
    unsafe { flexo_problem_free(p) };
}

#[test]
fn errors_set_codes_and_messages() {
    let mut p = ptr::null_mut();
    let status = unsafe {
        flexo_problem_new(1, -1.0, 0.01, [1.0].as_ptr(), [20.0].as_ptr(), 4.0, 0, ptr::null(), ptr::null(), &mut p)
    };
    assert_eq!(status, FlexoStatus::InvalidArgument);
    assert!(p.is_null());
    assert!(last_error().contains("eps_x"), "{}", last_error());

    let status = unsafe { flexo_robust_solve(ptr::null(), 1, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(status, FlexoStatus::NullPointer);

    let q = one_user();
    let mut x = [0.0; 2];
    let status = unsafe { flexo_robust_solve(q, 2, x.as_mut_ptr(), x.as_mut_ptr()) };
    assert_eq!(status, FlexoStatus::InvalidArgument);
    unsafe { flexo_problem_free(q) };

    let bad = CString::new("not = [valid").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { flexo_scenario_from_toml(bad.as_ptr(), &mut s) }, FlexoStatus::InvalidArgument);
    assert!(s.is_null());

    // Freeing null handles is a no-op.
    unsafe {
        flexo_problem_free(ptr::null_mut());
        flexo_scenario_free(ptr::null_mut());
        flexo_assignment_free(ptr::null_mut());
    }
}

#[test]
fn pipeline_on_the_frozen_scenario() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { flexo_scenario_frozen(&mut s) }, FlexoStatus::Ok);
    let n = unsafe { flexo_scenario_users(s) };
    assert_eq!(n, 7);
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { flexo_run_pipeline(s, 50, &mut a) }, FlexoStatus::Ok, "{}", last_error());
    let (mut x, mut beta) = (vec![0.0; n], vec![0.0; n]);
    assert_eq!(unsafe { flexo_assignment_decision(a, n, x.as_mut_ptr(), beta.as_mut_ptr()) }, FlexoStatus::Ok);
    assert!(beta.iter().all(|b| *b >= 0.0));
    let mut cv = f64::NAN;
    assert_eq!(unsafe { flexo_assignment_cv(a, &mut cv) }, FlexoStatus::Ok);
    assert!(cv.is_finite());
    unsafe {
        flexo_assignment_free(a);
        flexo_scenario_free(s);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(flexo_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
