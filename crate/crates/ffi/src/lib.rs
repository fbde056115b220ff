//! C ABI over `convtrans`: load a checkpoint (or a compiled curriculum
//! directory), run predictions, and simulate trajectories into caller-owned
//! buffers.
//!
//! Every function returns a [`CtStatus`]. On failure a message is available
//! from [`ct_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use convtrans::eval::CompiledModel;
use convtrans::model::{class_probabilities, load_checkpoint, Task};
use convtrans::rng::derive_tagged;
use convtrans::trajgen::{add_noise, generate, DiffusionModel};
use convtrans::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Checkpoint = 5,
    Parse = 6,
    Config = 7,
    Domain = 8,
    Shape = 9,
    TooShort = 10,
    Degenerate = 11,
    Numeric = 12,
    Data = 13,
    Panic = 14,
}

/// Opaque model handle.
pub struct CtModel {
    inner: CompiledModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut s = msg.into();
    s.retain(|c| c != '\0');
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

struct Failure(CtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Domain(_) => CtStatus::Domain,
            Error::Shape(_) => CtStatus::Shape,
            Error::Numeric { .. } => CtStatus::Numeric,
            Error::Config(_) => CtStatus::Config,
            Error::Degenerate(_) => CtStatus::Degenerate,
            Error::TooShort { .. } => CtStatus::TooShort,
            Error::Parse { .. } => CtStatus::Parse,
            Error::Data(_) => CtStatus::Data,
            Error::Io { .. } => CtStatus::Io,
            Error::Checkpoint(_) => CtStatus::Checkpoint,
        };
        Failure(code, e.to_string())
    }
}

fn fail(code: CtStatus, msg: impl Into<String>) -> Failure {
    Failure(code, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            CtStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(CtStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(fail(CtStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model_ref<'a>(model: *const CtModel) -> Result<&'a CtModel, Failure> {
    model.as_ref().ok_or_else(|| fail(CtStatus::NullPointer, "model is null"))
}

/// Message for the most recent failure on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `.ckpt` file, or a directory holding `model.ckpt` or a compiled
/// curriculum (`compiled.csv`). On success `*out` owns a handle to release
/// with [`ct_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_load(path: *const c_char, out: *mut *mut CtModel) -> CtStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(CtStatus::NullPointer, "path or out is null"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(CtStatus::InvalidArgument, "path is not UTF-8"))?;
        let p = Path::new(p);
        let inner = if p.is_dir() {
            CompiledModel::load_dir(p)?
        } else {
            CompiledModel::single(load_checkpoint(p)?)
        };
        *out = Box::into_raw(Box::new(CtModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`ct_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ct_model_free(model: *mut CtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Values written per trajectory: 1 for exponent regression, 5 class
/// probabilities for model classification.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_output_len(model: *const CtModel, out: *mut usize) -> CtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| fail(CtStatus::NullPointer, "out is null"))?;
        *out = output_len(m);
        Ok(())
    })
}

fn output_len(m: &CtModel) -> usize {
    match m.inner.task() {
        Task::Alpha => 1,
        Task::Model => DiffusionModel::ALL.len(),
    }
}

/// Predicts for `count` trajectories stored back to back in `positions`,
/// the i-th having `lengths[i]` points. Writes `count × output_len` values
/// to `out`: the raw exponent estimate, or the class probabilities in code
/// order (ATTM, CTRW, FBM, LW, SBM). Trajectories are standardized first.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn ct_model_predict(
    model: *const CtModel,
    positions: *const f64,
    lengths: *const usize,
    count: usize,
    out: *mut f64,
    out_len: usize,
) -> CtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let lengths = slice(lengths, count, "lengths")?;
        let total: usize = lengths.iter().sum();
        let positions = slice(positions, total, "positions")?;
        let width = output_len(m);
        if out_len < count * width {
            return Err(fail(
                CtStatus::BufferTooSmall,
                format!("output needs {} values, got {out_len}", count * width),
            ));
        }
        let out = slice_mut(out, out_len, "out")?;
        let mut seqs = Vec::with_capacity(count);
        let mut at = 0;
        for &l in lengths {
            seqs.push(&positions[at..at + l]);
            at += l;
        }
        let rows = m.inner.predict(&seqs)?;
        for (row, dst) in rows.iter().zip(out.chunks_mut(width)) {
            match m.inner.task() {
                Task::Alpha => dst[0] = row[0],
                Task::Model => dst.copy_from_slice(&class_probabilities(row).1),
            }
        }
        Ok(())
    })
}

/// Simulates one trajectory of `length` points into `out`. `model_code` is
/// 0..4 for ATTM, CTRW, FBM, LW, SBM. Pass an infinite `snr` for a
/// noiseless path.
///
/// # Safety
/// `out` must hold at least `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ct_generate(
    model_code: u32,
    alpha: f64,
    length: usize,
    seed: u64,
    snr: f64,
    out: *mut f64,
    out_len: usize,
) -> CtStatus {
    guard(|| {
        let model = DiffusionModel::from_code(model_code as usize)
            .map_err(|e| fail(CtStatus::InvalidArgument, e.to_string()))?;
        if out_len < length {
            return Err(fail(
                CtStatus::BufferTooSmall,
                format!("output needs {length} values, got {out_len}"),
            ));
        }
        let out = slice_mut(out, out_len, "out")?;
        let mut traj = generate(model, alpha, length, seed)?;
        if snr.is_finite() {
            traj = add_noise(&traj, snr, derive_tagged(seed, "noise", 0))?;
        }
        out[..length].copy_from_slice(&traj.positions);
        Ok(())
    })
}

#[cfg(test)]
mod tests;
