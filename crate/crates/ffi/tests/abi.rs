use std::ffi::{c_char, CStr, CString};
use std::ptr;

use shadagrad::optimizers::{run, OptimizerConfig, Schedule};
use shadagrad::problems::make_quartic_sigmoid;
use shadagrad_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = shg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take_string(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    shg_string_free(p);
    s
}

fn quartic() -> *mut ShgProblem {
    let spec = cstr(r#"{"name": "quartic_sigmoid", "n": 8, "d": 3, "seed": 0}"#);
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { shg_problem_from_json(spec.as_ptr(), &mut p) }, ShgStatus::Ok);
    assert!(!p.is_null());
    p
}

#[test]
fn problem_roundtrip_matches_core() {
    let p = quartic();
    let core = make_quartic_sigmoid(8, 3, 0);
    let (mut n, mut d) = (0, 0);
    unsafe {
        assert_eq!(shg_problem_shape(p, &mut n, &mut d), ShgStatus::Ok);
        assert_eq!((n, d), (8, 3));
        let x = [0.3, -0.2, 0.5];
        let mut v = 0.0;
        assert_eq!(shg_problem_value(p, x.as_ptr(), 3, &mut v), ShgStatus::Ok);
        assert_eq!(v, core.value(&x).unwrap());
        let mut g = [0.0; 3];
        assert_eq!(shg_problem_full_grad(p, x.as_ptr(), 3, g.as_mut_ptr(), 3), ShgStatus::Ok);
        assert_eq!(g.to_vec(), core.full_grad(&x).unwrap());
        let batch = [1usize, 4];
        assert_eq!(
            shg_problem_batch_grad(p, batch.as_ptr(), 2, x.as_ptr(), 3, g.as_mut_ptr(), 3),
            ShgStatus::Ok
        );
        assert_eq!(g.to_vec(), core.batch_grad(&batch, &x).unwrap());
        let mut err = 1.0;
        assert_eq!(shg_problem_fd_check(p, x.as_ptr(), 3, 1e-6, &mut err), ShgStatus::Ok);
        assert!(err < 1e-6);
        shg_problem_free(p);
    }
}

#[test]
fn error_codes_and_messages() {
    let p = quartic();
    unsafe {
        let x = [0.0; 2];
        let mut v = 0.0;
        assert_eq!(shg_problem_value(p, x.as_ptr(), 2, &mut v), ShgStatus::Shape);
        assert!(last_error().contains("shape"), "{}", last_error());

        let mut g = [0.0; 2];
        let x3 = [0.0; 3];
        assert_eq!(shg_problem_full_grad(p, x3.as_ptr(), 3, g.as_mut_ptr(), 2), ShgStatus::BufferTooSmall);

        assert_eq!(shg_problem_value(ptr::null(), x3.as_ptr(), 3, &mut v), ShgStatus::NullPointer);
        assert_eq!(shg_problem_value(p, x3.as_ptr(), 3, ptr::null_mut()), ShgStatus::NullPointer);

        // a successful call clears the message
        assert_eq!(shg_problem_value(p, x3.as_ptr(), 3, &mut v), ShgStatus::Ok);
        assert!(shg_last_error().is_null());

        let mut q = ptr::null_mut();
        let bad = cstr(r#"{"name": "quartic_sigmoid", "n": 8}"#);
        assert_eq!(shg_problem_from_json(bad.as_ptr(), &mut q), ShgStatus::Config);
        assert!(last_error().contains("problem.d"));
        let bad = cstr("{");
        assert_eq!(shg_problem_from_json(bad.as_ptr(), &mut q), ShgStatus::Config);
        let not_utf8 = [0xffu8 as c_char, 0];
        assert_eq!(shg_problem_from_json(not_utf8.as_ptr(), &mut q), ShgStatus::InvalidUtf8);
        assert!(q.is_null());

        let name = CStr::from_ptr(shg_status_name(ShgStatus::GateExhausted));
        assert_eq!(name.to_str().unwrap(), "gate_exhausted");
        shg_problem_free(p);
        shg_problem_free(ptr::null_mut());
        shg_string_free(ptr::null_mut());
    }
}

#[test]
fn run_matches_core() {
    let p = quartic();
    let cfg = OptimizerConfig::shadagrad(4, Schedule::constant(0.1), 3.0);
    let cfg_json = cstr(&serde_json::to_string(&cfg).unwrap());
    let mut out = ptr::null_mut();
    let text = unsafe {
        assert_eq!(shg_run(p, cfg_json.as_ptr(), 5, 7, &mut out), ShgStatus::Ok);
        take_string(out)
    };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let core = run(&make_quartic_sigmoid(8, 3, 0), &cfg, 5, 7).unwrap();
    assert_eq!(v["complete"], true);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for (r, c) in rows.iter().zip(&core.rows) {
        assert_eq!(r["loss"].as_f64().unwrap(), c.loss);
        assert_eq!(r["grad_evals"].as_u64().unwrap(), c.grad_evals);
    }
    let bad = cstr(r#"{"method": "sgd"}"#);
    unsafe {
        assert_eq!(shg_run(p, bad.as_ptr(), 5, 7, &mut out), ShgStatus::Config);
        shg_problem_free(p);
    }
}

#[test]
fn history_handle() {
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(shg_history_new(1, 1, 1.0, -1.0, &mut h), ShgStatus::Ok);
        let g = [2.0];
        assert_eq!(shg_history_push(h, g.as_ptr(), 1), ShgStatus::Ok);
        let mut out = [0.0];
        assert_eq!(shg_history_precondition(h, g.as_ptr(), 1, out.as_mut_ptr(), 1), ShgStatus::Ok);
        // G = 4 + 4, so G^{-1/2} g = 2 / sqrt(8)
        assert!((out[0] - 0.5f64.sqrt()).abs() < 1e-15);
        let mut d = 0.0;
        assert_eq!(shg_history_delta(h, &mut d), ShgStatus::Ok);
        assert_eq!(d, 4.0);
        assert_eq!(shg_history_push(h, g.as_ptr(), 1), ShgStatus::Shape);
        assert_eq!(shg_history_seal_epoch(h), ShgStatus::Ok);

        let mut snap = ptr::null_mut();
        assert_eq!(shg_history_snapshot(h, &mut snap), ShgStatus::Ok);
        let mut h2 = ptr::null_mut();
        assert_eq!(shg_history_restore(snap, &mut h2), ShgStatus::Ok);
        shg_string_free(snap);
        let mut a = [0.0];
        let mut b = [0.0];
        assert_eq!(shg_history_precondition(h, g.as_ptr(), 1, a.as_mut_ptr(), 1), ShgStatus::Ok);
        assert_eq!(shg_history_precondition(h2, g.as_ptr(), 1, b.as_mut_ptr(), 1), ShgStatus::Ok);
        assert_eq!(a, b);
        shg_history_free(h);
        shg_history_free(h2);

        let mut z = ptr::null_mut();
        assert_eq!(shg_history_new(0, 1, 1.0, -1.0, &mut z), ShgStatus::Shape);
        assert_eq!(shg_history_new(2, 1, 1.0, 0.0, &mut z), ShgStatus::Ok);
        let mut out = [0.0; 2];
        let g2 = [1.0, 0.0];
        assert_eq!(shg_history_precondition(z, g2.as_ptr(), 2, out.as_mut_ptr(), 2), ShgStatus::Numerical);
        shg_history_free(z);
    }
}

#[test]
fn experiment_writes_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cstr(
        r#"{"problem": {"name": "quadratic", "n": 4, "d": 2}, "m": 2,
            "optimizers": [{"method": "sgd", "sampling": "shuffled", "etas": [0.5]}],
            "epochs": 3, "seeds": [0, 1]}"#,
    );
    let out_dir = cstr(dir.path().to_str().unwrap());
    let mut out = ptr::null_mut();
    let text = unsafe {
        assert_eq!(shg_experiment_run(cfg.as_ptr(), out_dir.as_ptr(), 1, &mut out), ShgStatus::Ok);
        take_string(out)
    };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("index.json").exists());
    let bad = cstr(r#"{"problem": {"name": "quadratic", "n": 4, "d": 2}, "m": 3}"#);
    unsafe {
        assert_eq!(shg_experiment_run(bad.as_ptr(), ptr::null(), 0, &mut out), ShgStatus::Config);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/shadagrad.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let mut count = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
            count += 1;
        }
    }
    assert!(count >= 18, "{count}");
    assert!(header.contains("SHG_STATUS_GATE_EXHAUSTED = 8"));
    assert!(header.contains("typedef struct ShgProblem ShgProblem;"));
}
