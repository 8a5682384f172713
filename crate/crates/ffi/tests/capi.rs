use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use chrono::NaiveDate;
use dva_core::data::{chronological_split, WindowPair};
use dva_core::training::{predict, train_stock, TrainConfig};
use dva_ffi::*;

fn last_error() -> String {
    let p = dva_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn sharpe_and_degenerate_returns() {
    let mut out = 0.0;
    let r = [0.02, 0.0];
    assert_eq!(unsafe { dva_sharpe(r.as_ptr(), 2, &mut out) }, DvaStatus::Ok);
    assert!((out - 0.707_106_781_186_547_5).abs() < 1e-12);
    let flat = [0.01; 4];
    assert_eq!(unsafe { dva_sharpe(flat.as_ptr(), 4, &mut out) }, DvaStatus::DegenerateReturns);
    assert!(last_error().contains("degenerate"));
    assert_eq!(unsafe { dva_sharpe(ptr::null(), 4, &mut out) }, DvaStatus::NullPointer);
}

#[test]
fn weights_match_hand_examples() {
    let sigma = [1.0, 0.0, 0.0, 1.0];
    let mut w = [0.0; 2];
    let st = unsafe { dva_mean_variance_weights([0.1, 0.2].as_ptr(), sigma.as_ptr(), 2, 1.0, w.as_mut_ptr()) };
    assert_eq!(st, DvaStatus::Ok);
    assert!((w[0] - 0.45).abs() < 1e-6 && (w[1] - 0.55).abs() < 1e-6);
    let st = unsafe { dva_mean_variance_weights([-1.0, 0.5].as_ptr(), sigma.as_ptr(), 2, 1.0, w.as_mut_ptr()) };
    assert_eq!(st, DvaStatus::Ok);
    assert!(w[0].abs() < 1e-6 && (w[1] - 1.0).abs() < 1e-6);
    let st = unsafe { dva_mean_variance_weights([0.1, 0.2].as_ptr(), sigma.as_ptr(), 2, -1.0, w.as_mut_ptr()) };
    assert_eq!(st, DvaStatus::Contract);
}

#[test]
fn glasso_row_major_round_trip() {
    let sigma = [2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5];
    let mut theta = [0.0; 9];
    assert_eq!(unsafe { dva_graphical_lasso(sigma.as_ptr(), 3, 0.0, theta.as_mut_ptr()) }, DvaStatus::Ok);
    let s = nalgebra::DMatrix::from_row_slice(3, 3, &sigma);
    let inv = s.try_inverse().unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((theta[i * 3 + j] - inv[(i, j)]).abs() < 1e-6);
        }
    }
    assert_eq!(unsafe { dva_graphical_lasso(sigma.as_ptr(), 3, -1.0, theta.as_mut_ptr()) }, DvaStatus::Contract);
}

#[test]
fn schedule_handle() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { dva_schedule_new(2, 0.1, 0.2, 2.0, &mut s) }, DvaStatus::Ok);
    let mut ab = 0.0;
    assert_eq!(unsafe { dva_schedule_alpha_bar(s, 2, 0, &mut ab) }, DvaStatus::Ok);
    assert!((ab - 0.72).abs() < 1e-15);
    assert_eq!(unsafe { dva_schedule_alpha_bar(s, 2, 1, &mut ab) }, DvaStatus::Ok);
    assert!((ab - 0.48).abs() < 1e-15);
    assert_eq!(unsafe { dva_schedule_alpha_bar(s, 3, 1, &mut ab) }, DvaStatus::InvalidArgument);
    unsafe { dva_schedule_free(s) };

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { dva_schedule_new(10, 0.1, 0.5, 2.0, &mut bad) }, DvaStatus::Config);
    assert!(bad.is_null());
    assert!(last_error().contains("exceeds unit variance"));
}

fn windows(n: usize, t_in: usize, t_out: usize) -> Vec<WindowPair> {
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    (0..n)
        .map(|i| {
            let r = |k: usize| 1.0 + 0.01 * ((i + k) as f64 * 0.7).sin();
            WindowPair {
                anchor: start + chrono::Duration::days(i as i64),
                anchor_index: i + t_in - 1,
                x: (0..t_in).map(|k| [1.0, 1.01, 0.99, 0.0, r(k) - 1.0, r(k)]).collect(),
                y: (0..t_out).map(|k| r(t_in + k)).collect(),
            }
        })
        .collect()
}

#[test]
fn model_load_and_predict() {
    let cfg = TrainConfig {
        t_in: 8,
        t_out: 4,
        epochs: 1,
        ..TrainConfig::default()
    };
    let split = chronological_split(windows(40, 8, 4), (7, 1, 2)).unwrap();
    let trained = train_stock("A", 0, &split, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run0.json");
    std::fs::write(&path, trained.checkpoint.to_json().unwrap()).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let hash = CString::new(cfg.hash()).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dva_model_load(c_path.as_ptr(), hash.as_ptr(), &mut model) }, DvaStatus::Ok);
    assert_eq!(unsafe { dva_model_input_len(model) }, 8);
    assert_eq!(unsafe { dva_model_output_len(model) }, 4);

    let w = &split.test[0];
    let x: Vec<f64> = w.x.iter().flatten().copied().collect();
    let mut out = [0.0; 4];
    let st = unsafe { dva_model_predict(model, x.as_ptr(), x.len(), out.as_mut_ptr(), 4) };
    assert_eq!(st, DvaStatus::Ok);
    let expected = predict(&trained.checkpoint, std::slice::from_ref(w)).unwrap();
    assert_eq!(out.to_vec(), expected[0]);

    let st = unsafe { dva_model_predict(model, x.as_ptr(), x.len() - 1, out.as_mut_ptr(), 4) };
    assert_eq!(st, DvaStatus::InvalidArgument);
    unsafe { dva_model_free(model) };

    let wrong = CString::new("0".repeat(64)).unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { dva_model_load(c_path.as_ptr(), wrong.as_ptr(), &mut m2) }, DvaStatus::HashMismatch);
    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dva_model_load(missing.as_ptr(), ptr::null(), &mut m2) }, DvaStatus::MissingArtifact);
    assert!(m2.is_null());
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dva.h")).unwrap();
    for name in [
        "dva_last_error_message",
        "dva_model_load",
        "dva_model_predict",
        "dva_model_free",
        "dva_mean_variance_weights",
        "dva_graphical_lasso",
        "dva_sharpe",
        "dva_schedule_alpha_bar",
        "typedef struct DvaModel DvaModel",
        "DVA_STATUS_HASH_MISMATCH = 10",
    ] {
        assert!(header.contains(name), "{name} missing from dva.h");
    }
}

/// Compile and run a C program against the static library.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let profile_dir: PathBuf = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libdva_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let exe = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("dva_c_smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
