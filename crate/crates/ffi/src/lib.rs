//! C ABI for loading checkpoints, scoring answerability and generating
//! responses. Every function returns a [`RulStatus`]; on failure the message
//! is available from [`rul_last_error_message`] on the same thread.
//!
//! Strings handed out by the library must be released with
//! [`rul_string_free`]; handles with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serde::Deserialize;

use rul_core::corpus::{tokenize, Vocab};
use rul_core::eval::{informativeness, token_f1};
use rul_core::model::{answerability, generate, load_checkpoint, Aggregation, GenerateOptions, ModelParams, Prepared};
use rul_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RulStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct RulModel {
    params: ModelParams,
}

/// Opaque vocabulary handle.
pub struct RulVocab {
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RulStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => RulStatus::Io,
            Error::Json(_) | Error::Parse { .. } => RulStatus::Parse,
            Error::Checkpoint(_) => RulStatus::Checkpoint,
            _ => RulStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RulStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RulStatus::Ok
        }
        Ok(Err(Failure(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            RulStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(RulStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RulStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(RulStatus::Validation, "output contains a NUL byte".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn null_check<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(RulStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Input {
    query: String,
    paragraphs: Vec<Vec<String>>,
}

fn prepare(json: &str, vocab: &Vocab) -> Result<Prepared, Failure> {
    let input: Input =
        serde_json::from_str(json).map_err(|e| Failure(RulStatus::Parse, format!("input JSON: {e}")))?;
    Ok(Prepared {
        query: vocab.encode(&tokenize(&input.query)),
        paragraphs: input
            .paragraphs
            .iter()
            .map(|p| p.iter().map(|s| vocab.encode(&tokenize(s))).collect())
            .collect(),
    })
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library; valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn rul_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rul_model_load(path: *const c_char, out: *mut *mut RulModel) -> RulStatus {
    guard(|| {
        null_check(out, "out")?;
        let p = text(path, "path")?;
        let params = load_checkpoint(Path::new(p))?;
        *out = Box::into_raw(Box::new(RulModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rul_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rul_model_free(model: *mut RulModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a `vocab.json` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rul_vocab_load(path: *const c_char, out: *mut *mut RulVocab) -> RulStatus {
    guard(|| {
        null_check(out, "out")?;
        let p = text(path, "path")?;
        let body = std::fs::read_to_string(p).map_err(|e| Failure(RulStatus::Io, format!("{p}: {e}")))?;
        let vocab: Vocab = serde_json::from_str(&body).map_err(|e| Failure(RulStatus::Parse, format!("{p}: {e}")))?;
        *out = Box::into_raw(Box::new(RulVocab { vocab }));
        Ok(())
    })
}

/// # Safety
/// `vocab` must come from [`rul_vocab_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rul_vocab_free(vocab: *mut RulVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Scores `input_json` (`{"query": "...", "paragraphs": [["sentence", ...], ...]}`)
/// and writes the answerability output as JSON to `out_json`.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn rul_predict(
    model: *const RulModel,
    vocab: *const RulVocab,
    input_json: *const c_char,
    mean_pooling: bool,
    tau: f64,
    out_json: *mut *mut c_char,
) -> RulStatus {
    guard(|| {
        null_check(model, "model")?;
        null_check(vocab, "vocab")?;
        null_check(out_json, "out_json")?;
        let (m, v) = (&*model, &*vocab);
        let input = prepare(text(input_json, "input_json")?, &v.vocab)?;
        let agg = if mean_pooling { Aggregation::Mean } else { Aggregation::Attention };
        if !(0.0..=1.0).contains(&tau) {
            return Err(Failure(RulStatus::Validation, "tau must lie in [0, 1]".into()));
        }
        let out = answerability(&m.params, &input, agg, tau)?;
        out_string(serde_json::to_string(&out).map_err(Error::from)?, out_json)
    })
}

/// Decides answerability and greedily decodes a response. Writes
/// `{"y_pred": bool, "ranking_score": f64, "text": "..."}` to `out_json`.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn rul_generate(
    model: *const RulModel,
    vocab: *const RulVocab,
    input_json: *const c_char,
    tau: f64,
    max_len: usize,
    out_json: *mut *mut c_char,
) -> RulStatus {
    guard(|| {
        null_check(model, "model")?;
        null_check(vocab, "vocab")?;
        null_check(out_json, "out_json")?;
        let (m, v) = (&*model, &*vocab);
        let input = prepare(text(input_json, "input_json")?, &v.vocab)?;
        let opts = GenerateOptions {
            tau,
            max_len,
            ..GenerateOptions::default()
        };
        let g = generate(&m.params, &input, &opts)?;
        let body = serde_json::json!({
            "y_pred": g.y_pred,
            "ranking_score": g.ranking_score,
            "text": v.vocab.decode(&g.tokens).join(" "),
        });
        out_string(body.to_string(), out_json)
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rul_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Token F1 between whitespace-tokenized strings; -1 on a null or non-UTF-8
/// argument.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rul_token_f1(pred: *const c_char, gold: *const c_char) -> f64 {
    match (text(pred, "pred"), text(gold, "gold")) {
        (Ok(p), Ok(g)) => token_f1(&tokenize(p), &tokenize(g)),
        _ => -1.0,
    }
}

/// Reason and suggestion count (0 to 2) of a refusal; -1 on a bad argument.
///
/// # Safety
/// `refusal` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rul_informativeness(refusal: *const c_char) -> i32 {
    match text(refusal, "refusal") {
        Ok(r) => i32::from(informativeness(&tokenize(r)).0),
        Err(_) => -1,
    }
}
