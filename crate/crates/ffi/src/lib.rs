//! C ABI over `aes-core`.
//!
//! Every fallible function returns an [`AesStatus`]; on failure a message is
//! available from [`aes_last_error_message`] on the same thread. Strings
//! returned through out-pointers are owned by the caller and must be released
//! with [`aes_string_free`]. Model handles are released with
//! [`aes_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aes_core::corpus::{builtin_prompt_table, PromptTable, ScoreRange};
use aes_core::evaluation::{qwk, RatingPair};
use aes_core::scoring::{load_model, score_essay, ModelState, ScoringError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AesStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    VersionMismatch = 5,
    UnknownPrompt = 6,
    EmptyEssay = 7,
    InvalidArgument = 8,
    Internal = 9,
}

/// Loaded model plus the prompt table it was validated against.
pub struct AesModel {
    model: ModelState,
    table: PromptTable,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: AesStatus, msg: impl Into<String>) -> AesStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> AesStatus) -> AesStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(AesStatus::Internal, "panic inside aes_ffi"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, AesStatus> {
    if p.is_null() {
        return Err(fail(AesStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AesStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> AesStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            AesStatus::Ok
        }
        Err(_) => fail(AesStatus::Internal, "output contains an interior NUL"),
    }
}

fn scoring_status(e: &ScoringError) -> AesStatus {
    match e {
        ScoringError::Io(_) => AesStatus::Io,
        ScoringError::CorruptCheckpoint(_) => AesStatus::CorruptCheckpoint,
        ScoringError::VersionMismatch(_) => AesStatus::VersionMismatch,
        ScoringError::UnknownPrompt(_) | ScoringError::UnknownGenre { .. } => AesStatus::UnknownPrompt,
        ScoringError::EmptyEssay => AesStatus::EmptyEssay,
        _ => AesStatus::Internal,
    }
}

/// Loads a checkpoint. `prompts_path` may be null for the built-in prompt
/// table.
///
/// # Safety
/// Non-null string arguments must be NUL-terminated; `out` must be a valid
/// pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn aes_model_load(
    checkpoint_path: *const c_char,
    prompts_path: *const c_char,
    out: *mut *mut AesModel,
) -> AesStatus {
    guard(|| {
        if out.is_null() {
            return fail(AesStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(checkpoint_path, "checkpoint_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let table = if prompts_path.is_null() {
            builtin_prompt_table()
        } else {
            let p = match str_arg(prompts_path, "prompts_path") {
                Ok(p) => p,
                Err(s) => return s,
            };
            match PromptTable::load(Path::new(p)) {
                Ok(t) => t,
                Err(e) => return fail(AesStatus::InvalidArgument, e.to_string()),
            }
        };
        match load_model(Path::new(path), &table) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(AesModel { model, table }));
                AesStatus::Ok
            }
            Err(e) => fail(scoring_status(&e), e.to_string()),
        }
    })
}

/// Releases a handle from [`aes_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aes_model_free(model: *mut AesModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Scores `text` against `prompt_id` and writes the report as JSON.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn aes_model_score_json(
    model: *const AesModel,
    prompt_id: u32,
    text: *const c_char,
    out_json: *mut *mut c_char,
) -> AesStatus {
    guard(|| {
        if model.is_null() || out_json.is_null() {
            return fail(AesStatus::NullArgument, "model or out_json is null");
        }
        *out_json = ptr::null_mut();
        let handle = &*model;
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let Some(spec) = handle.table.get(prompt_id) else {
            return fail(AesStatus::UnknownPrompt, format!("unknown prompt {prompt_id}"));
        };
        match score_essay(text, spec, &handle.model) {
            Ok(report) => write_string(out_json, serde_json::to_string(&report).expect("report serializes")),
            Err(e) => fail(scoring_status(&e), e.to_string()),
        }
    })
}

/// Writes the handle's prompt table as JSON.
///
/// # Safety
/// `model` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn aes_prompt_table_json(model: *const AesModel, out_json: *mut *mut c_char) -> AesStatus {
    guard(|| {
        if model.is_null() || out_json.is_null() {
            return fail(AesStatus::NullArgument, "model or out_json is null");
        }
        let json = serde_json::to_string(&(*model).table).expect("table serializes");
        write_string(out_json, json)
    })
}

/// Quadratic weighted kappa of two rating arrays of length `n` on the rubric
/// `[min, max]`.
///
/// # Safety
/// `human` and `machine` must point to `n` readable values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aes_qwk(
    human: *const i32,
    machine: *const i32,
    n: usize,
    min: i32,
    max: i32,
    out: *mut f64,
) -> AesStatus {
    guard(|| {
        if human.is_null() || machine.is_null() || out.is_null() {
            return fail(AesStatus::NullArgument, "null rating or output pointer");
        }
        let range = match ScoreRange::new(min, max) {
            Ok(r) => r,
            Err(e) => return fail(AesStatus::InvalidArgument, e.to_string()),
        };
        let h = std::slice::from_raw_parts(human, n).to_vec();
        let m = std::slice::from_raw_parts(machine, n).to_vec();
        match RatingPair::new(h, m, range) {
            Ok(pair) => {
                *out = qwk(&pair);
                AesStatus::Ok
            }
            Err(e) => fail(AesStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aes_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aes_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aes_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
