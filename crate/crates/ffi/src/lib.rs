//! C ABI over the enhancement model.
//!
//! Models live behind an opaque [`Uses2Model`] handle. Every fallible call returns a
//! [`Uses2Status`]; the message of the most recent failure on the calling thread is
//! available from [`uses2_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use uses2::audio::Waveform;
use uses2::model::{load_checkpoint, macs_per_second, param_count_for, Model, ModelConfig};
use uses2::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Uses2Status {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    UnsupportedRate = 3,
    InvalidSignal = 4,
    Config = 5,
    Checkpoint = 6,
    Io = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct Uses2Model {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> Uses2Status {
    match e {
        Error::UnsupportedRate(_) => Uses2Status::UnsupportedRate,
        Error::EmptySignal
        | Error::InvalidWaveform(_)
        | Error::Shape(_)
        | Error::LengthMismatch(..)
        | Error::RateMismatch(..)
        | Error::InconsistentLength { .. }
        | Error::ZeroEnergyEstimate
        | Error::ZeroReference => Uses2Status::InvalidSignal,
        Error::Config(_) | Error::Json(_) => Uses2Status::Config,
        Error::Checkpoint(_) | Error::Manifest(_) => Uses2Status::Checkpoint,
        Error::Io(_) | Error::Wav(_) => Uses2Status::Io,
        Error::Training(_) | Error::Tensor(_) => Uses2Status::Internal,
    }
}

struct Failure(Uses2Status, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: Uses2Status, msg: &str) -> Result<T, Failure> {
    Err(Failure(status, msg.to_string()))
}

/// Runs `f`, recording the error message and mapping panics to [`Uses2Status::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Uses2Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Uses2Status::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            Uses2Status::Panic
        }
    }
}

unsafe fn utf8<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return fail(Uses2Status::NullArgument, &format!("{what} is null"));
    }
    CStr::from_ptr(s)
        .to_str()
        .or_else(|_| fail(Uses2Status::InvalidArgument, &format!("{what} is not UTF-8")))
}

unsafe fn handle<'a>(m: *const Uses2Model) -> Result<&'a Uses2Model, Failure> {
    m.as_ref().map_or_else(|| fail(Uses2Status::NullArgument, "model handle is null"), Ok)
}

unsafe fn emit(out: *mut *mut Uses2Model, model: Model) {
    *out = Box::into_raw(Box::new(Uses2Model { model }));
}

/// Loads a checkpoint directory. On success `*out` owns a handle to release with
/// [`uses2_model_free`].
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uses2_model_load(dir: *const c_char, out: *mut *mut Uses2Model) -> Uses2Status {
    guard(|| {
        if out.is_null() {
            return fail(Uses2Status::NullArgument, "out is null");
        }
        let dir = utf8(dir, "dir")?;
        let (model, _) = load_checkpoint(Path::new(dir))?;
        emit(out, model);
        Ok(())
    })
}

/// Builds a freshly initialized model. `config_json` is a JSON object as accepted by
/// the command-line tool's "model" section, or null for the default comp variant.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uses2_model_new(config_json: *const c_char, seed: u64, out: *mut *mut Uses2Model) -> Uses2Status {
    guard(|| {
        if out.is_null() {
            return fail(Uses2Status::NullArgument, "out is null");
        }
        let cfg = if config_json.is_null() {
            ModelConfig::comp()
        } else {
            let v: serde_json::Value = serde_json::from_str(utf8(config_json, "config_json")?).map_err(Error::from)?;
            ModelConfig::from_json(&v)?
        };
        emit(out, Model::new(cfg, seed)?);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uses2_model_free(model: *mut Uses2Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uses2_model_param_count(model: *const Uses2Model, out: *mut usize) -> Uses2Status {
    guard(|| {
        let m = handle(model)?;
        if out.is_null() {
            return fail(Uses2Status::NullArgument, "out is null");
        }
        *out = param_count_for(&m.model.config);
        Ok(())
    })
}

/// Multiply-accumulate operations per second of input.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uses2_model_macs_per_second(
    model: *const Uses2Model,
    rate_hz: u32,
    channels: usize,
    out: *mut f64,
) -> Uses2Status {
    guard(|| {
        let m = handle(model)?;
        if out.is_null() {
            return fail(Uses2Status::NullArgument, "out is null");
        }
        if channels == 0 {
            return fail(Uses2Status::InvalidArgument, "channels must be positive");
        }
        *out = macs_per_second(&m.model.config, rate_hz, channels)?;
        Ok(())
    })
}

/// Enhances `channels` channel-major runs of `frames` samples each at `rate_hz` and
/// writes `frames` single-channel samples to `out`, which holds `out_len` floats.
///
/// # Safety
/// `samples` must hold `channels * frames` floats and `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn uses2_enhance(
    model: *const Uses2Model,
    samples: *const f32,
    channels: usize,
    frames: usize,
    rate_hz: u32,
    out: *mut f32,
    out_len: usize,
) -> Uses2Status {
    guard(|| {
        let m = handle(model)?;
        if samples.is_null() || out.is_null() {
            return fail(Uses2Status::NullArgument, "sample buffer is null");
        }
        if channels == 0 || frames == 0 {
            return fail(Uses2Status::InvalidArgument, "channels and frames must be positive");
        }
        if out_len < frames {
            return fail(
                Uses2Status::BufferTooSmall,
                &format!("output holds {out_len} samples, {frames} needed"),
            );
        }
        let total = channels
            .checked_mul(frames)
            .map_or_else(|| fail(Uses2Status::InvalidArgument, "buffer size overflows"), Ok)?;
        let input = std::slice::from_raw_parts(samples, total).to_vec();
        let est = m.model.forward(&Waveform::new(input, channels, rate_hz)?)?;
        std::slice::from_raw_parts_mut(out, frames).copy_from_slice(est.samples());
        Ok(())
    })
}

/// Message of the last failed call on this thread, empty after a success. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn uses2_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn uses2_status_string(status: Uses2Status) -> *const c_char {
    let s: &'static CStr = match status {
        Uses2Status::Ok => c"ok",
        Uses2Status::NullArgument => c"null argument",
        Uses2Status::InvalidArgument => c"invalid argument",
        Uses2Status::UnsupportedRate => c"unsupported sampling rate",
        Uses2Status::InvalidSignal => c"invalid signal",
        Uses2Status::Config => c"invalid configuration",
        Uses2Status::Checkpoint => c"checkpoint error",
        Uses2Status::Io => c"i/o error",
        Uses2Status::BufferTooSmall => c"buffer too small",
        Uses2Status::Internal => c"internal error",
        Uses2Status::Panic => c"panic",
    };
    s.as_ptr()
}

/// Library version.
#[no_mangle]
pub extern "C" fn uses2_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"",
    };
    V.as_ptr()
}
