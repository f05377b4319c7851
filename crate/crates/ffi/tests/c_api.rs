//! The C entry points, driven from Rust as a C caller would.

use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use benard_mix_ffi::*;

const SMALL: &str = "[grid]\nn1 = 8\nn2 = 8\nn3 = 16\n[stepper]\ndt = 0.015625\n[noise]\nm = 8\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(bmix_last_error()) }.to_string_lossy().into_owned()
}

fn small_config() -> *mut BmixConfig {
    let text = CString::new(SMALL).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { bmix_config_parse(text.as_ptr(), &mut cfg) }, BmixStatus::Ok, "{}", last_error());
    cfg
}

#[test]
fn config_round_trip_and_errors() {
    let cfg = small_config();
    let mut hash = ptr::null_mut();
    assert_eq!(unsafe { bmix_config_hash(cfg, &mut hash) }, BmixStatus::Ok);
    let h = unsafe { CStr::from_ptr(hash) }.to_str().unwrap().to_owned();
    assert_eq!(h, benard_mix::config::RunConfig::parse(SMALL).unwrap().hash());
    unsafe { bmix_string_free(hash) };

    // changing the seed changes the hash
    assert_eq!(unsafe { bmix_config_set_seed(cfg, 99) }, BmixStatus::Ok);
    let mut again = ptr::null_mut();
    unsafe { bmix_config_hash(cfg, &mut again) };
    assert_ne!(unsafe { CStr::from_ptr(again) }.to_str().unwrap(), h);
    unsafe {
        bmix_string_free(again);
        bmix_config_free(cfg);
    }

    let bad = CString::new("[grid]\nn3 = 42\nc = 0.25\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { bmix_config_parse(bad.as_ptr(), &mut out) }, BmixStatus::Config);
    assert!(out.is_null());
    assert!(last_error().contains("must be an integer"), "{}", last_error());

    assert_eq!(unsafe { bmix_config_parse(ptr::null(), &mut out) }, BmixStatus::NullPointer);
    let invalid = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { bmix_config_parse(invalid.as_ptr().cast(), &mut out) }, BmixStatus::InvalidUtf8);
    unsafe {
        bmix_config_free(ptr::null_mut());
        bmix_string_free(ptr::null_mut());
    }
}

#[test]
fn simulator_advances_and_exposes_the_field() {
    let cfg = small_config();
    let init = CString::new("random:1").unwrap();
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { bmix_simulator_new(cfg, init.as_ptr(), &mut sim) }, BmixStatus::Ok, "{}", last_error());
    let (mut n1, mut n2, mut planes) = (0, 0, 0);
    assert_eq!(unsafe { bmix_simulator_shape(sim, &mut n1, &mut n2, &mut planes) }, BmixStatus::Ok);
    assert_eq!((n1, n2, planes), (8, 8, 17));

    let mut before = vec![0.0; n1 * n2 * planes];
    assert_eq!(unsafe { bmix_simulator_temperature(sim, before.as_mut_ptr(), before.len()) }, BmixStatus::Ok);
    assert_eq!(unsafe { bmix_simulator_advance(sim, 2) }, BmixStatus::Ok, "{}", last_error());
    let mut k = 0;
    unsafe { bmix_simulator_step_index(sim, &mut k) };
    assert_eq!(k, 2);
    let mut after = vec![0.0; before.len()];
    unsafe { bmix_simulator_temperature(sim, after.as_mut_ptr(), after.len()) };
    assert_ne!(before, after);
    // walls hold the boundary data
    let pl = n1 * n2;
    assert!(after[..pl].iter().all(|&t| t == after[0]));
    assert!(after[(planes - 1) * pl..].iter().all(|&t| t == after[(planes - 1) * pl]));
    let mut h1 = 0.0;
    unsafe { bmix_simulator_h1_norm(sim, &mut h1) };
    assert!(h1.is_finite() && h1 > 0.0);

    let mut short = vec![0.0; 3];
    assert_eq!(unsafe { bmix_simulator_temperature(sim, short.as_mut_ptr(), 3) }, BmixStatus::BufferTooSmall);

    // same config and seed, same chain
    let mut twin = ptr::null_mut();
    unsafe { bmix_simulator_new(cfg, init.as_ptr(), &mut twin) };
    unsafe { bmix_simulator_advance(twin, 2) };
    let mut twin_t = vec![0.0; before.len()];
    unsafe { bmix_simulator_temperature(twin, twin_t.as_mut_ptr(), twin_t.len()) };
    assert_eq!(after, twin_t);

    let sideways = CString::new("sideways").unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { bmix_simulator_new(cfg, sideways.as_ptr(), &mut none) }, BmixStatus::InvalidArgument);
    unsafe {
        bmix_simulator_free(sim);
        bmix_simulator_free(twin);
        bmix_config_free(cfg);
    }
}

#[test]
fn experiments_run_by_name() {
    let cfg = small_config();
    let kind = CString::new("simulate").unwrap();
    let mut json = ptr::null_mut();
    let mut passed = false;
    let status = unsafe { bmix_run_experiment(cfg, kind.as_ptr(), ptr::null(), &mut json, &mut passed) };
    assert_eq!(status, BmixStatus::Ok, "{}", last_error());
    let report: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    assert_eq!(report["kind"], "simulate");
    assert!(passed);
    unsafe { bmix_string_free(json) };

    let unknown = CString::new("levitate").unwrap();
    let status = unsafe { bmix_run_experiment(cfg, unknown.as_ptr(), ptr::null(), &mut json, &mut passed) };
    assert_eq!(status, BmixStatus::InvalidArgument);
    assert!(last_error().contains("levitate"));
    unsafe { bmix_config_free(cfg) };
}

#[test]
fn header_declares_every_entry_point_and_compiles_as_c() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{dir}/include/benard_mix.h")).unwrap();
    let src = std::fs::read_to_string(format!("{dir}/src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 10);
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from the header");
    }
    // a C compiler, when present, must accept the header
    let probe = std::env::temp_dir().join("benard_mix_header_probe.c");
    std::fs::write(&probe, "#include \"benard_mix.h\"\nint main(void) { return bmix_last_error() == 0; }\n").unwrap();
    if let Ok(o) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-I"]).arg(format!("{dir}/include")).arg(&probe).output() {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}
