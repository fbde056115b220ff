use std::ffi::{CStr, CString};
use std::ptr;

use convtrans::model::{save_checkpoint, Checkpoint, ModelConfig, ModelParams, Task};

use super::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ct_last_error()) }.to_string_lossy().into_owned()
}

fn saved_model(task: Task, dir: &Path) -> CString {
    let config = ModelConfig::for_task(task);
    let params = ModelParams::init(&config, 3).unwrap();
    let path = dir.join("model.ckpt");
    save_checkpoint(&Checkpoint::new(config, params, 3), &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn load(path: &CString) -> *mut CtModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ct_model_load(path.as_ptr(), &mut m) }, CtStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn path_of(len: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; len];
    assert_eq!(unsafe { ct_generate(2, 1.0, len, seed, f64::INFINITY, v.as_mut_ptr(), len) }, CtStatus::Ok);
    v
}

#[test]
fn generate_matches_library() {
    let v = path_of(100, 9);
    let lib = generate(DiffusionModel::Fbm, 1.0, 100, 9).unwrap();
    assert_eq!(v, lib.positions);
    let mut noisy = vec![0.0; 100];
    assert_eq!(unsafe { ct_generate(2, 1.0, 100, 9, 2.0, noisy.as_mut_ptr(), 100) }, CtStatus::Ok);
    assert_ne!(noisy, v);
}

#[test]
fn generate_errors() {
    let mut v = vec![0.0; 10];
    let s = unsafe { ct_generate(7, 1.0, 10, 0, f64::INFINITY, v.as_mut_ptr(), 10) };
    assert_eq!(s, CtStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let s = unsafe { ct_generate(0, 1.5, 10, 0, f64::INFINITY, v.as_mut_ptr(), 10) };
    assert_eq!(s, CtStatus::Domain, "ATTM is sub-diffusive only");
    let s = unsafe { ct_generate(2, 1.0, 20, 0, f64::INFINITY, v.as_mut_ptr(), 10) };
    assert_eq!(s, CtStatus::BufferTooSmall);
    let s = unsafe { ct_generate(2, 1.0, 10, 0, f64::INFINITY, ptr::null_mut(), 10) };
    assert_eq!(s, CtStatus::NullPointer);
    let s = unsafe { ct_generate(2, 1.0, 10, 0, -1.0, v.as_mut_ptr(), 10) };
    assert_eq!(s, CtStatus::Domain);
}

#[test]
fn regression_predictions_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_model(Task::Alpha, dir.path());
    let m = load(&path);
    let mut width = 0;
    assert_eq!(unsafe { ct_model_output_len(m, &mut width) }, CtStatus::Ok);
    assert_eq!(width, 1);
    let (a, b) = (path_of(30, 1), path_of(55, 2));
    let flat: Vec<f64> = a.iter().chain(&b).copied().collect();
    let lens = [30usize, 55];
    let mut out = [0.0; 2];
    let s = unsafe { ct_model_predict(m, flat.as_ptr(), lens.as_ptr(), 2, out.as_mut_ptr(), 2) };
    assert_eq!(s, CtStatus::Ok, "{}", last_error());
    let lib = CompiledModel::single(load_checkpoint(Path::new(path.to_str().unwrap())).unwrap());
    let want = lib.predict(&[&a, &b]).unwrap();
    assert_eq!(out, [want[0][0], want[1][0]]);
    unsafe { ct_model_free(m) };
}

#[test]
fn classification_returns_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let m = load(&saved_model(Task::Model, dir.path()));
    let x = path_of(40, 4);
    let mut out = [0.0; 5];
    let s = unsafe { ct_model_predict(m, x.as_ptr(), [40usize].as_ptr(), 1, out.as_mut_ptr(), 5) };
    assert_eq!(s, CtStatus::Ok, "{}", last_error());
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let s = unsafe { ct_model_predict(m, x.as_ptr(), [40usize].as_ptr(), 1, out.as_mut_ptr(), 4) };
    assert_eq!(s, CtStatus::BufferTooSmall);
    unsafe { ct_model_free(m) };
}

#[test]
fn predict_reports_library_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = load(&saved_model(Task::Alpha, dir.path()));
    let mut out = [0.0; 1];
    let short = path_of(5, 1);
    let s = unsafe { ct_model_predict(m, short.as_ptr(), [5usize].as_ptr(), 1, out.as_mut_ptr(), 1) };
    assert_eq!(s, CtStatus::TooShort);
    assert!(last_error().contains("too short"), "{}", last_error());
    let flat = [3.0; 20];
    let s = unsafe { ct_model_predict(m, flat.as_ptr(), [20usize].as_ptr(), 1, out.as_mut_ptr(), 1) };
    assert_eq!(s, CtStatus::Degenerate);
    let s = unsafe { ct_model_predict(ptr::null(), flat.as_ptr(), [20usize].as_ptr(), 1, out.as_mut_ptr(), 1) };
    assert_eq!(s, CtStatus::NullPointer);
    unsafe { ct_model_free(m) };
}

#[test]
fn load_errors_and_directory_loading() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { ct_model_load(missing.as_ptr(), &mut m) }, CtStatus::Io);
    assert!(m.is_null());
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ct_model_load(junk.as_ptr(), &mut m) }, CtStatus::Checkpoint);
    assert_eq!(unsafe { ct_model_load(ptr::null(), &mut m) }, CtStatus::NullPointer);
    saved_model(Task::Alpha, dir.path());
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    let m = load(&d);
    unsafe { ct_model_free(m) };
    unsafe { ct_model_free(ptr::null_mut()) };
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ct_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
