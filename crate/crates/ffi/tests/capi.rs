use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use qaoa_perceptron::instance::{build_energy_table, generate_instance, CostVariant};
use qaoa_perceptron::schedules::ScheduleParams;
use qaoa_perceptron::statevec::{MixerConfig, Propagator};
use qaoa_perceptron_ffi::*;

fn last_error() -> String {
    let p = qp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn table(n: usize, m: usize, seed: u64, nc: u8) -> *mut QpTable {
    let mut inst = ptr::null_mut();
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(qp_instance_generate(n, m, seed, &mut inst), QpStatus::Ok);
        assert_eq!(qp_table_build(inst, nc, &mut t), QpStatus::Ok);
        qp_instance_free(inst);
    }
    t
}

#[test]
fn energy_and_gradient_match_the_library() {
    let (betas, gammas) = ([0.7, 0.4, 0.2], [0.1, 0.3, 0.6]);
    let t = table(6, 4, 11, 1);
    let mut e = f64::NAN;
    let mut g0 = f64::NAN;
    let mut grad = [0.0; 6];
    let status = unsafe { qp_energy(t, betas.as_ptr(), gammas.as_ptr(), 3, 1.0, &mut e, &mut g0, grad.as_mut_ptr()) };
    assert_eq!(status, QpStatus::Ok);

    let lib = build_energy_table(&generate_instance(6, 4, 11), CostVariant::Linear).unwrap();
    let prop = Propagator::new(&lib, MixerConfig::default()).unwrap();
    let params = ScheduleParams::new(betas.to_vec(), gammas.to_vec()).unwrap();
    let (report, expected) = prop.energy_and_gradient(&params).unwrap();
    assert_eq!(e, report.energy_density);
    assert_eq!(g0, report.ground_overlap);
    assert_eq!(grad.to_vec(), expected);

    let mut e2 = f64::NAN;
    let status = unsafe { qp_energy(t, betas.as_ptr(), gammas.as_ptr(), 3, 1.0, &mut e2, &mut g0, ptr::null_mut()) };
    assert_eq!((status, e2), (QpStatus::Ok, e));
    unsafe { qp_table_free(t) };
}

#[test]
fn optimize_lowers_the_energy_in_place() {
    let t = table(5, 3, 2, 0);
    let mut betas = [0.8, 0.5, 0.2];
    let mut gammas = [0.2, 0.5, 0.8];
    let mut start = f64::NAN;
    let mut overlap = f64::NAN;
    unsafe {
        qp_energy(t, betas.as_ptr(), gammas.as_ptr(), 3, 1.0, &mut start, &mut overlap, ptr::null_mut());
    }
    let (mut e, mut iters, mut converged) = (f64::NAN, 0usize, false);
    let status = unsafe {
        qp_optimize(
            t,
            betas.as_mut_ptr(),
            gammas.as_mut_ptr(),
            3,
            1.0,
            1e-8,
            500,
            &mut e,
            &mut iters,
            &mut converged,
        )
    };
    assert_eq!(status, QpStatus::Ok);
    assert!(e <= start && iters > 0);
    let mut check = f64::NAN;
    unsafe { qp_energy(t, betas.as_ptr(), gammas.as_ptr(), 3, 1.0, &mut check, &mut overlap, ptr::null_mut()) };
    assert_eq!(check, e);
    unsafe { qp_table_free(t) };
}

#[test]
fn gap_opens_at_twice_the_field() {
    let t = table(4, 3, 5, 0);
    let (mut e0, mut e1) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { qp_lowest_two(t, 0.0, 1.0, 1e-10, &mut e0, &mut e1) }, QpStatus::Ok);
    assert!((e0 + 4.0).abs() < 1e-9 && (e1 - e0 - 2.0).abs() < 1e-9);
    unsafe { qp_table_free(t) };
}

#[test]
fn randomization_keeps_size_and_solution_count() {
    let t = table(7, 5, 3, 0);
    let mut r = ptr::null_mut();
    let (mut n, mut sols, mut rn, mut rsols) = (0, 0, 0, 0);
    unsafe {
        assert_eq!(qp_table_randomize(t, 9, &mut r), QpStatus::Ok);
        assert_eq!(qp_table_info(t, &mut n, &mut sols), QpStatus::Ok);
        assert_eq!(qp_table_info(r, &mut rn, &mut rsols), QpStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(qp_table_randomize(r, 10, &mut again), QpStatus::InvalidArgument);
        assert!(again.is_null());
        qp_table_free(r);
        qp_table_free(t);
    }
    assert_eq!((n, sols), (rn, rsols));
    assert_eq!(n, 7);
}

#[test]
fn instance_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("s.json").to_str().unwrap()).unwrap();
    let mut a = ptr::null_mut();
    let mut b = ptr::null_mut();
    let (mut n, mut m) = (0, 0);
    unsafe {
        assert_eq!(qp_instance_generate(9, 6, 4, &mut a), QpStatus::Ok);
        assert_eq!(qp_instance_write_json(a, path.as_ptr()), QpStatus::Ok);
        assert_eq!(qp_instance_read_json(path.as_ptr(), &mut b), QpStatus::Ok);
        assert_eq!(qp_instance_shape(b, &mut n, &mut m), QpStatus::Ok);
        qp_instance_free(a);
        qp_instance_free(b);
    }
    assert_eq!((n, m), (9, 6));
}

#[test]
fn failures_map_to_status_codes() {
    let mut inst = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/s.json").unwrap();
    unsafe {
        assert_eq!(qp_instance_read_json(missing.as_ptr(), &mut inst), QpStatus::Io);
        assert_eq!(qp_instance_read_json(ptr::null(), &mut inst), QpStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(qp_instance_generate(0, 3, 1, &mut inst), QpStatus::InvalidArgument);
        assert_eq!(qp_instance_generate(3, 3, 1, ptr::null_mut()), QpStatus::NullPointer);
        assert_eq!(qp_instance_generate(40, 3, 1, &mut inst), QpStatus::Ok);
        let mut t = ptr::null_mut();
        assert_eq!(qp_table_build(inst, 0, &mut t), QpStatus::CapacityExceeded);
        assert_eq!(qp_table_build(inst, 2, &mut t), QpStatus::InvalidArgument);
        assert!(last_error().contains("nc"));
        assert!(t.is_null());
        qp_instance_free(inst);
        qp_instance_free(ptr::null_mut());
        qp_table_free(ptr::null_mut());
    }
    let t = table(3, 1, 1, 0);
    let (b, g) = ([0.1], [f64::NAN]);
    let (mut e, mut o) = (0.0, 0.0);
    assert_eq!(
        unsafe { qp_energy(t, b.as_ptr(), g.as_ptr(), 1, 1.0, &mut e, &mut o, ptr::null_mut()) },
        QpStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { qp_energy(t, b.as_ptr(), b.as_ptr(), 1, -1.0, &mut e, &mut o, ptr::null_mut()) },
        QpStatus::InvalidArgument
    );
    unsafe { qp_table_free(t) };
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("qaoa_perceptron.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct QpInstance QpInstance;",
        "typedef struct QpTable QpTable;",
        "QP_STATUS_OK = 0",
        "qp_last_error_message",
        "qp_instance_generate",
        "qp_table_build",
        "qp_energy",
        "qp_optimize",
        "qp_lowest_two",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include "qaoa_perceptron.h"

int main(void) {
    QpInstance *inst = NULL;
    QpTable *table = NULL;
    if (qp_instance_generate(5, 3, 7, &inst) != QP_STATUS_OK) return 1;
    if (qp_table_build(inst, 1, &table) != QP_STATUS_OK) return 2;
    double betas[2] = {0.5, 0.1}, gammas[2] = {0.1, 0.5}, e = -1.0, overlap = -1.0;
    if (qp_energy(table, betas, gammas, 2, 1.0, &e, &overlap, NULL) != QP_STATUS_OK) return 3;
    if (qp_table_build(inst, 3, &table) != QP_STATUS_INVALID_ARGUMENT) return 4;
    if (qp_last_error_message() == NULL) return 5;
    printf("%.17g %.17g\n", e, overlap);
    qp_table_free(table);
    qp_instance_free(inst);
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    // Test binaries live in <target>/<profile>/deps; the archive one level up.
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libqaoa_perceptron_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());

    let text = String::from_utf8(out.stdout).unwrap();
    let mut fields = text.split_whitespace().map(|v| v.parse::<f64>().unwrap());
    let (e, overlap) = (fields.next().unwrap(), fields.next().unwrap());
    let lib_table = build_energy_table(&generate_instance(5, 3, 7), CostVariant::Linear).unwrap();
    let prop = Propagator::new(&lib_table, MixerConfig::default()).unwrap();
    let report = prop.energy(&ScheduleParams::new(vec![0.5, 0.1], vec![0.1, 0.5]).unwrap()).unwrap();
    assert_eq!((e, overlap), (report.energy_density, report.ground_overlap));
}
