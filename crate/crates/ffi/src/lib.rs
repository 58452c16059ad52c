//! C interface over `abacus-core`.
//!
//! Every fallible call returns an [`AbacusStatus`]; on failure a message is
//! kept per thread and read with [`abacus_last_error`]. Strings returned to
//! the caller are owned by the caller and released with
//! [`abacus_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use abacus_core::cli::parse_canonical_question;
use abacus_core::encoding::{canonical_answer, encode_prompt, Vocabulary};
use abacus_core::evaluation::{greedy_generate, Decoder, ModelDecoder, OracleDecoder};
use abacus_core::model::{Checkpoint, CheckpointKind, Model};
use abacus_core::task_data::oracle_answer;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbacusStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidInput = 4,
    Model = 5,
    Panic = 6,
}

/// Opaque handle to a loaded checkpoint.
pub struct AbacusModel {
    vocab: Vocabulary,
    model: Option<Model>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), (AbacusStatus, String)>) -> AbacusStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AbacusStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AbacusStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AbacusStatus, String)> {
    if p.is_null() {
        return Err((AbacusStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AbacusStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn to_c(s: String) -> Result<*mut c_char, (AbacusStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (AbacusStatus::InvalidInput, "string contains NUL".to_owned()))
}

fn invalid(e: impl std::fmt::Display) -> (AbacusStatus, String) {
    (AbacusStatus::InvalidInput, e.to_string())
}

/// Loads a checkpoint file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abacus_model_load(path: *const c_char, out: *mut *mut AbacusModel) -> AbacusStatus {
    guard(|| {
        if out.is_null() {
            return Err((AbacusStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let ck = Checkpoint::load(Path::new(path)).map_err(|e| match e {
            abacus_core::model::ModelError::Io(io) => (AbacusStatus::Io, format!("{path}: {io}")),
            other => (AbacusStatus::Model, format!("{path}: {other}")),
        })?;
        let model = match ck.kind {
            CheckpointKind::Model => Some(ck.model.ok_or((AbacusStatus::Model, "checkpoint holds no model".to_owned()))?),
            CheckpointKind::Oracle => None,
        };
        *out = Box::into_raw(Box::new(AbacusModel {
            vocab: Vocabulary::standard(),
            model,
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`abacus_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn abacus_model_free(model: *mut AbacusModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learned scalars; 0 for an oracle stub.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abacus_model_param_count(model: *const AbacusModel, out: *mut u64) -> AbacusStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return Err((AbacusStatus::NullPointer, "model or out is null".into()));
        };
        *out = m.model.as_ref().map_or(0, |m| m.num_params() as u64);
        Ok(())
    })
}

/// Greedy answer to a canonical question such as `"123+45"`, written
/// most-significant digit first.
///
/// # Safety
/// `model` must be a live handle, `question` NUL-terminated, and `out` a
/// valid pointer that receives a string to release with
/// [`abacus_string_free`].
#[no_mangle]
pub unsafe extern "C" fn abacus_generate(
    model: *const AbacusModel,
    question: *const c_char,
    max_new_tokens: u32,
    out: *mut *mut c_char,
) -> AbacusStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return Err((AbacusStatus::NullPointer, "model or out is null".into()));
        };
        *out = ptr::null_mut();
        let q = read_str(question, "question")?;
        let p = parse_canonical_question(q).map_err(invalid)?;
        let prompt = encode_prompt(&m.vocab, &p).map_err(invalid)?;
        let oracle;
        let model_dec;
        let dec: &dyn Decoder = match &m.model {
            Some(model) => {
                model_dec = ModelDecoder::new(model, &m.vocab);
                &model_dec
            }
            None => {
                oracle = OracleDecoder { vocab: m.vocab.clone() };
                &oracle
            }
        };
        let (text, _) =
            greedy_generate(dec, &prompt.tokens, max_new_tokens as usize).map_err(|e| (AbacusStatus::Model, e.to_string()))?;
        *out = to_c(canonical_answer(p.task, &text))?;
        Ok(())
    })
}

/// Exact answer to a canonical question, most-significant digit first.
///
/// # Safety
/// `question` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abacus_oracle_answer(question: *const c_char, out: *mut *mut c_char) -> AbacusStatus {
    guard(|| {
        if out.is_null() {
            return Err((AbacusStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let q = read_str(question, "question")?;
        let p = parse_canonical_question(q).map_err(invalid)?;
        let answer = oracle_answer(p.task, &p.operands).map_err(invalid)?;
        *out = to_c(answer)?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn abacus_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn abacus_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
