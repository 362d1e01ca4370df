//! C ABI for loading a trained model and scoring entity-pair bags.
//!
//! Every fallible function returns a [`CreStatus`]; on failure the message
//! is available from [`cre_last_error_message`] on the same thread.
//! Strings returned by the library must be released with
//! [`cre_string_free`], models with [`cre_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cre_core::checkpoint::load_checkpoint;
use cre_core::data::{EntityPairBag, NA_INDEX};
use cre_core::embedding::WordEmbeddingTable;
use cre_core::evaluation::predict;
use cre_core::model::ModelParams;
use cre_core::objective::normalize;
use cre_core::scoring::{score_complex, score_transe};
use cre_core::CreError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CreStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidInput = 5,
    Dimension = 6,
    Checkpoint = 7,
    UnknownEntity = 8,
    Panic = 9,
    Other = 10,
}

/// A trained model together with the word vectors it reads.
pub struct CreModel {
    params: ModelParams,
    words: WordEmbeddingTable,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &CreError) -> CreStatus {
    match err {
        CreError::Io { .. } => CreStatus::Io,
        CreError::Parse { .. } => CreStatus::Parse,
        CreError::Dimension(_) => CreStatus::Dimension,
        CreError::Checkpoint(_) => CreStatus::Checkpoint,
        CreError::UnknownEntity(_) => CreStatus::UnknownEntity,
        CreError::InvalidInput(_)
        | CreError::IndexOutOfRange(_)
        | CreError::EntitiesOutsideWindow { .. }
        | CreError::EmptyDataset(_) => CreStatus::InvalidInput,
        _ => CreStatus::Other,
    }
}

struct Failure(CreStatus, String);

impl From<CreError> for Failure {
    fn from(e: CreError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CreStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CreStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CreStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CreStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CreStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure(CreStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn null_out(name: &str) -> Failure {
    Failure(CreStatus::NullPointer, format!("{name} is null"))
}

/// Loads a checkpoint and the word-embedding file it was trained with.
///
/// # Safety
/// `checkpoint_path` and `embeddings_path` must be NUL-terminated strings;
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn cre_model_load(
    checkpoint_path: *const c_char,
    embeddings_path: *const c_char,
    out: *mut *mut CreModel,
) -> CreStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = ptr::null_mut();
        let checkpoint = str_arg(checkpoint_path, "checkpoint_path")?;
        let embeddings = str_arg(embeddings_path, "embeddings_path")?;
        let params = load_checkpoint(Path::new(checkpoint))?;
        let words = WordEmbeddingTable::load(Path::new(embeddings))?;
        if words.dim() != params.config.word_dim {
            return Err(Failure(
                CreStatus::Dimension,
                format!(
                    "{embeddings} has dimension {}, model expects {}",
                    words.dim(),
                    params.config.word_dim
                ),
            ));
        }
        *out = Box::into_raw(Box::new(CreModel { params, words }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`cre_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cre_model_free(model: *mut CreModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of relations including N/A at index 0; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cre_model_num_relations(model: *const CreModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.relation_vocab.len())
}

/// Predicts the `k` best non-N/A relations of one bag.
///
/// `bag_json` is an object with `head_id`, `tail_id` and `sentences` (each
/// with `tokens`, `head_index`, `tail_index`, `head_id`, `tail_id`). On
/// success `*out_json` receives an array of `{relation, index, score}`
/// objects, best first.
///
/// # Safety
/// `model` must be a live handle, `bag_json` a NUL-terminated string and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cre_model_predict_json(
    model: *const CreModel,
    bag_json: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> CreStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null_out("out_json"));
        }
        *out_json = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null_out("model"))?;
        let text = str_arg(bag_json, "bag_json")?;
        let bad_json = |e: serde_json::Error| Failure(CreStatus::Parse, format!("bag_json: {e}"));
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(bad_json)?;
        if let Some(obj) = value.as_object_mut() {
            obj.entry("gold_relations").or_insert_with(|| serde_json::json!([NA_INDEX]));
        }
        let bag: EntityPairBag = serde_json::from_value(value).map_err(bad_json)?;
        if bag.sentences.is_empty() {
            return Err(Failure(CreStatus::InvalidInput, "bag has no sentences".into()));
        }
        for s in &bag.sentences {
            s.validate()?;
        }
        let records = predict(&model.params, &model.words, &bag, k)?;
        let out: Vec<serde_json::Value> = records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "relation": model.params.relation_vocab[r.relation],
                    "index": r.relation,
                    "score": r.score,
                })
            })
            .collect();
        let s = serde_json::to_string(&out).expect("predictions serialize");
        *out_json = CString::new(s).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cre_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cre_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// TransE score `1 - tanh(|h + r - t|)` of three `dim`-vectors.
///
/// # Safety
/// `head`, `rel` and `tail` must point to `dim` readable doubles and `out`
/// to one writable double.
#[no_mangle]
pub unsafe extern "C" fn cre_score_transe(
    head: *const f64,
    rel: *const f64,
    tail: *const f64,
    dim: usize,
    out: *mut f64,
) -> CreStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null_out("out"))?;
        *out = score_transe(
            slice_arg(head, dim, "head")?,
            slice_arg(rel, dim, "rel")?,
            slice_arg(tail, dim, "tail")?,
        )?;
        Ok(())
    })
}

/// ComplEx score `1 + tanh(Re<h, r, conj(t)>)`; `dim` must be even, with
/// real parts first and imaginary parts second.
///
/// # Safety
/// As for [`cre_score_transe`].
#[no_mangle]
pub unsafe extern "C" fn cre_score_complex(
    head: *const f64,
    rel: *const f64,
    tail: *const f64,
    dim: usize,
    out: *mut f64,
) -> CreStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null_out("out"))?;
        *out = score_complex(
            slice_arg(head, dim, "head")?,
            slice_arg(rel, dim, "rel")?,
            slice_arg(tail, dim, "tail")?,
        )?;
        Ok(())
    })
}

/// Divides `n` positive scores by their sum, writing into `out`.
///
/// # Safety
/// `scores` must point to `n` readable doubles and `out` to `n` writable
/// doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn cre_normalize(scores: *const f64, n: usize, out: *mut f64) -> CreStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        let normalized = normalize(slice_arg(scores, n, "scores")?)?;
        ptr::copy(normalized.as_ptr(), out, n);
        Ok(())
    })
}
