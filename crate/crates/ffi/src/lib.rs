//! C interface to the `taed` library.
//!
//! Every function returns a [`TaedStatus`]; on failure the message is kept
//! per thread and can be read with [`taed_last_error`]. Handles are opaque
//! and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use taed::metrics;
use taed::model::{Checkpoint, Model, OFFLINE_CHUNK};
use taed::numeric::Tensor;
use taed::streaming::{stream_decode, StreamOptions, DEFAULT_MAX_SYMBOLS_PER_FRAME};
use taed::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Numeric = 6,
    Panic = 7,
}

/// A loaded model.
pub struct TaedModel {
    model: Model,
}

/// Tokens and per-token delays from one decode.
pub struct TaedResult {
    tokens: Vec<u32>,
    delays_ms: Vec<f64>,
    source_ms: f64,
    cap_hits: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaedLatency {
    pub al: f64,
    pub laal: f64,
    pub ap: f64,
    pub dal: f64,
}

/// Decode settings. `chunk_frames == 0` decodes offline.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaedDecodeOptions {
    pub chunk_frames: usize,
    pub tau: f64,
    pub max_symbols_per_frame: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

struct Failure(TaedStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => TaedStatus::Io,
            Error::Format { .. } | Error::Version { .. } | Error::Json(_) => TaedStatus::Format,
            Error::Config(_) => TaedStatus::Config,
            e if e.is_numeric() => TaedStatus::Numeric,
            _ => TaedStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TaedStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TaedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TaedStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TaedStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(TaedStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(TaedStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(TaedStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(TaedStatus::NullPointer, "output pointer is null".into()));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failure on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn taed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Defaults: offline, no blank penalty, the library's emission cap.
#[no_mangle]
pub extern "C" fn taed_decode_options_default() -> TaedDecodeOptions {
    TaedDecodeOptions {
        chunk_frames: 0,
        tau: 0.0,
        max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
    }
}

/// # Safety
/// `ckpt_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn taed_model_load(ckpt_path: *const c_char, out: *mut *mut TaedModel) -> TaedStatus {
    guard(|| {
        let p = path(ckpt_path)?;
        let model = Checkpoint::load(&p)?.to_model()?;
        put(out, Box::into_raw(Box::new(TaedModel { model })))
    })
}

/// # Safety
/// `model` must come from [`taed_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn taed_model_free(model: *mut TaedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn taed_model_feature_dim(model: *const TaedModel, out: *mut usize) -> TaedStatus {
    guard(|| put(out, non_null(model, "model")?.model.config().feature_dim))
}

/// Vocabulary size including BOS; the blank index equals this value.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn taed_model_vocab_size(model: *const TaedModel, out: *mut usize) -> TaedStatus {
    guard(|| put(out, non_null(model, "model")?.model.config().vocab_size))
}

/// Greedy decoding of `frames × feature_dim` row-major features.
///
/// # Safety
/// `model` must be a live handle, `features` must hold `frames * feature_dim`
/// floats, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn taed_decode(
    model: *const TaedModel,
    features: *const f32,
    frames: usize,
    feature_dim: usize,
    options: TaedDecodeOptions,
    out: *mut *mut TaedResult,
) -> TaedStatus {
    guard(|| {
        let m = &non_null(model, "model")?.model;
        if frames == 0 {
            return Err(invalid("no input frames"));
        }
        if feature_dim != m.config().feature_dim {
            return Err(invalid(format!(
                "feature_dim {feature_dim} does not match the model ({})",
                m.config().feature_dim
            )));
        }
        let n = frames.checked_mul(feature_dim).ok_or_else(|| invalid("input size overflows"))?;
        let data = slice(features, n, "features")?.iter().map(|&v| v as f64).collect();
        let x = Tensor::new(vec![frames, feature_dim], data)?;
        let opts = StreamOptions {
            chunk_frames: if options.chunk_frames == 0 { OFFLINE_CHUNK } else { options.chunk_frames },
            tau: options.tau,
            max_symbols_per_frame: options.max_symbols_per_frame,
            record_states: false,
        };
        let o = stream_decode(m, &x, &opts)?;
        let result = TaedResult {
            tokens: o.tokens.iter().map(|&t| t as u32).collect(),
            delays_ms: o.trace.delays(),
            source_ms: o.trace.source_total_ms,
            cap_hits: o.cap_hits,
        };
        put(out, Box::into_raw(Box::new(result)))
    })
}

/// # Safety
/// `result` must come from [`taed_decode`] or be null.
#[no_mangle]
pub unsafe extern "C" fn taed_result_free(result: *mut TaedResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Number of emitted tokens.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn taed_result_len(result: *const TaedResult) -> usize {
    result.as_ref().map_or(0, |r| r.tokens.len())
}

/// Pointer to `taed_result_len` token ids, owned by the result.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn taed_result_tokens(result: *const TaedResult) -> *const u32 {
    result.as_ref().map_or(ptr::null(), |r| r.tokens.as_ptr())
}

/// Pointer to `taed_result_len` emission delays in milliseconds.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn taed_result_delays(result: *const TaedResult) -> *const f64 {
    result.as_ref().map_or(ptr::null(), |r| r.delays_ms.as_ptr())
}

/// Source length in milliseconds.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn taed_result_source_ms(result: *const TaedResult) -> f64 {
    result.as_ref().map_or(0.0, |r| r.source_ms)
}

/// Frames where the emission cap stopped the search.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn taed_result_cap_hits(result: *const TaedResult) -> usize {
    result.as_ref().map_or(0, |r| r.cap_hits)
}

/// AL, LAAL, AP and DAL of a decode against a reference of `ref_len` tokens.
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn taed_result_latency(result: *const TaedResult, ref_len: usize, out: *mut TaedLatency) -> TaedStatus {
    guard(|| {
        let r = non_null(result, "result")?;
        put(out, latency(&r.delays_ms, r.source_ms, ref_len)?)
    })
}

fn latency(delays: &[f64], source_ms: f64, ref_len: usize) -> Result<TaedLatency, Failure> {
    if !(source_ms > 0.0) {
        return Err(invalid("source length must be positive"));
    }
    Ok(TaedLatency {
        al: metrics::average_lagging(delays, source_ms, ref_len),
        laal: metrics::length_adaptive_average_lagging(delays, source_ms, ref_len),
        ap: metrics::average_proportion(delays, source_ms),
        dal: metrics::differentiable_average_lagging(delays, source_ms, ref_len),
    })
}

/// Latency metrics from raw delays.
///
/// # Safety
/// `delays` must hold `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn taed_latency(delays: *const f64, n: usize, source_ms: f64, ref_len: usize, out: *mut TaedLatency) -> TaedStatus {
    guard(|| put(out, latency(slice(delays, n, "delays")?, source_ms, ref_len)?))
}

/// Word error rate of one hypothesis.
///
/// # Safety
/// The arrays must hold the given number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn taed_wer(
    reference: *const u32,
    ref_len: usize,
    hypothesis: *const u32,
    hyp_len: usize,
    out: *mut f64,
) -> TaedStatus {
    guard(|| {
        let r = slice(reference, ref_len, "reference")?;
        let h = slice(hypothesis, hyp_len, "hypothesis")?;
        put(out, metrics::wer(r, h))
    })
}

unsafe fn corpus(tokens: *const u32, lens: *const usize, n: usize, what: &str) -> Result<Vec<Vec<u32>>, Failure> {
    let lens = slice(lens, n, what)?;
    let total = lens.iter().try_fold(0usize, |a, &l| a.checked_add(l)).ok_or_else(|| invalid("lengths overflow"))?;
    let flat = slice(tokens, total, what)?;
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for &l in lens {
        out.push(flat[at..at + l].to_vec());
        at += l;
    }
    Ok(out)
}

/// Corpus BLEU (0..100) over `n` sentence pairs stored back to back, with
/// per-sentence lengths.
///
/// # Safety
/// Each token array must hold the sum of its lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn taed_bleu(
    ref_tokens: *const u32,
    ref_lens: *const usize,
    hyp_tokens: *const u32,
    hyp_lens: *const usize,
    n: usize,
    out: *mut f64,
) -> TaedStatus {
    guard(|| {
        let refs = corpus(ref_tokens, ref_lens, n, "references")?;
        let hyps = corpus(hyp_tokens, hyp_lens, n, "hypotheses")?;
        put(out, metrics::bleu(&refs, &hyps))
    })
}

/// Element-wise mean of `n` checkpoint files, written to `out_path`.
///
/// # Safety
/// `paths` must hold `n` NUL-terminated strings; `out_path` must be one.
#[no_mangle]
pub unsafe extern "C" fn taed_average_checkpoints(paths: *const *const c_char, n: usize, out_path: *const c_char) -> TaedStatus {
    guard(|| {
        let inputs = slice(paths, n, "paths")?
            .iter()
            .map(|&p| path(p))
            .collect::<Result<Vec<_>, _>>()?;
        if inputs.is_empty() {
            return Err(invalid("no checkpoints given"));
        }
        let dest = path(out_path)?;
        Checkpoint::average_files(&inputs)?.save(&dest)?;
        Ok(())
    })
}
