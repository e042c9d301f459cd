//! C ABI over the chunklens core.
//!
//! Objects cross the boundary as opaque handles created by `*_load`, `*_new`,
//! `*_fit` or `*_train` functions and released with the matching `*_free`.
//! Every fallible function returns a [`ClStatus`]; on failure the message is
//! available from [`cl_last_error_message`] on the same thread.
//!
//! Strings passed in must be NUL-terminated UTF-8. Output pointers must be
//! valid for writes. Handles are not thread-safe for concurrent mutation, but
//! distinct handles may be used from different threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use chunklens::pa::{self, Normalization, PopulationChunk};
use chunklens::rnnlab::RnnModel;
use chunklens::trace::{read_trace, write_trace, ActivationTrace};
use chunklens::ucd::{self, Dictionary, UcdConfig};
use chunklens::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Numerical = 6,
    Panic = 7,
}

impl From<&Error> for ClStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => ClStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) | Error::Config(_) => ClStatus::Format,
            Error::Validation { .. } => ClStatus::Validation,
            Error::InvalidArgument(_) | Error::CheckFailed(_) => ClStatus::InvalidArgument,
            Error::Numerical(_) => ClStatus::Numerical,
        }
    }
}

/// Detection counts from `cl_chunk_evaluate`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClConfusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// An activation trace.
pub struct ClTrace(ActivationTrace);

/// A fitted population-average chunk.
pub struct ClChunk(PopulationChunk);

/// A chunk dictionary.
pub struct ClDictionary(Dictionary);

/// A trained recurrent model.
pub struct ClModel(RnnModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(ClStatus);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        set_error(e.to_string());
        Fail(ClStatus::from(&e))
    }
}

fn fail(status: ClStatus, msg: impl Into<String>) -> Fail {
    set_error(msg);
    Fail(status)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ClStatus::Ok,
        Ok(Err(Fail(s))) => s,
        Err(_) => {
            set_error("internal panic");
            ClStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(ClStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ClStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    str_arg(p, name).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(ClStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(ClStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, v: T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(fail(ClStatus::NullPointer, format!("{name} is null")));
    }
    out.write(v);
    Ok(())
}

unsafe fn put_handle<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    put(out, Box::into_raw(Box::new(v)), "out")
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads an ACTR trace file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_trace_load(path: *const c_char, out: *mut *mut ClTrace) -> ClStatus {
    guard(|| {
        let t = read_trace(path_arg(path, "path")?)?;
        put_handle(out, ClTrace(t))
    })
}

/// Builds a trace from `layers * n_tokens * dim` values in layer, token,
/// neuron order. `tokens` holds `n_tokens` strings.
///
/// # Safety
/// Every pointer must be valid for the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cl_trace_new(
    model_id: *const c_char,
    layers: usize,
    dim: usize,
    tokens: *const *const c_char,
    n_tokens: usize,
    values: *const f32,
    n_values: usize,
    out: *mut *mut ClTrace,
) -> ClStatus {
    guard(|| {
        let id = str_arg(model_id, "model_id")?;
        let toks = slice_arg(tokens, n_tokens, "tokens")?
            .iter()
            .map(|&p| str_arg(p, "token").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let vals = slice_arg(values, n_values, "values")?.to_vec();
        let t = ActivationTrace::new(id, layers, dim, toks, vals, Vec::new())?;
        put_handle(out, ClTrace(t))
    })
}

/// Writes a trace to an ACTR file.
///
/// # Safety
/// `trace` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cl_trace_save(trace: *const ClTrace, path: *const c_char) -> ClStatus {
    guard(|| {
        let t = handle(trace, "trace")?;
        write_trace(&t.0, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Layer count, token count and width of a trace.
///
/// # Safety
/// `trace` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_trace_shape(
    trace: *const ClTrace,
    layers: *mut usize,
    tokens: *mut usize,
    dim: *mut usize,
) -> ClStatus {
    guard(|| {
        let t = &handle(trace, "trace")?.0;
        put(layers, t.layers, "layers")?;
        put(tokens, t.token_count(), "tokens")?;
        put(dim, t.dim, "dim")
    })
}

/// Copies the hidden state at (`layer`, `token`) into `buf`, which holds
/// `len` floats; `len` must equal the trace width.
///
/// # Safety
/// `trace` must be a live handle; `buf` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn cl_trace_state(
    trace: *const ClTrace,
    layer: usize,
    token: usize,
    buf: *mut f32,
    len: usize,
) -> ClStatus {
    guard(|| {
        let t = &handle(trace, "trace")?.0;
        if layer >= t.layers || token >= t.token_count() {
            return Err(fail(ClStatus::InvalidArgument, "layer or token out of range"));
        }
        if len != t.dim {
            return Err(fail(ClStatus::InvalidArgument, format!("buffer holds {len} floats, width is {}", t.dim)));
        }
        if buf.is_null() {
            return Err(fail(ClStatus::NullPointer, "buf is null"));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(t.state(layer, token));
        Ok(())
    })
}

/// Releases a trace. Null is ignored.
///
/// # Safety
/// `trace` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_trace_free(trace: *mut ClTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Fits a population-average chunk for `concept` at `layer`, with occurrence
/// indices shifted by `shift` tokens.
///
/// # Safety
/// `trace` must be a live handle, `concept` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cl_chunk_fit(
    trace: *const ClTrace,
    concept: *const c_char,
    layer: usize,
    shift: i64,
    out: *mut *mut ClChunk,
) -> ClStatus {
    guard(|| {
        let t = &handle(trace, "trace")?.0;
        let c = str_arg(concept, "concept")?;
        let fit = pa::fit_concept(t, c, layer, shift, Normalization::FullWidth)?;
        put_handle(out, ClChunk(fit.chunk))
    })
}

/// Reads a chunk from JSON.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_chunk_load(path: *const c_char, out: *mut *mut ClChunk) -> ClStatus {
    guard(|| {
        let c = PopulationChunk::load(path_arg(path, "path")?)?;
        put_handle(out, ClChunk(c))
    })
}

/// Writes a chunk as JSON.
///
/// # Safety
/// `chunk` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cl_chunk_save(chunk: *const ClChunk, path: *const c_char) -> ClStatus {
    guard(|| {
        handle(chunk, "chunk")?.0.save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Support size, tolerance and membership threshold of a chunk.
///
/// # Safety
/// `chunk` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cl_chunk_info(
    chunk: *const ClChunk,
    support_size: *mut usize,
    tol: *mut f64,
    delta: *mut f64,
) -> ClStatus {
    guard(|| {
        let c = &handle(chunk, "chunk")?.0;
        put(support_size, c.support.len(), "support_size")?;
        put(tol, c.tol, "tol")?;
        put(delta, c.delta, "delta")
    })
}

/// Writes 1 to `hit` when `state` (of `len` floats) is a member of the chunk,
/// else 0.
///
/// # Safety
/// `chunk` must be a live handle; `state` readable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn cl_chunk_detect(
    chunk: *const ClChunk,
    state: *const f32,
    len: usize,
    hit: *mut i32,
) -> ClStatus {
    guard(|| {
        let c = &handle(chunk, "chunk")?.0;
        let h = slice_arg(state, len, "state")?;
        put(hit, i32::from(pa::detect(c, h)?), "hit")
    })
}

/// Detection counts of a chunk against the concept occurrences of `trace`.
///
/// # Safety
/// `chunk` and `trace` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cl_chunk_evaluate(
    chunk: *const ClChunk,
    trace: *const ClTrace,
    out: *mut ClConfusion,
) -> ClStatus {
    guard(|| {
        let c = &handle(chunk, "chunk")?.0;
        let t = &handle(trace, "trace")?.0;
        let conf = pa::evaluate_concept(c, t)?;
        put(
            out,
            ClConfusion {
                tp: conf.tp,
                fp: conf.fp,
                tn: conf.tn,
                fn_: conf.fn_,
            },
            "out",
        )
    })
}

/// Releases a chunk. Null is ignored.
///
/// # Safety
/// `chunk` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_chunk_free(chunk: *mut ClChunk) {
    if !chunk.is_null() {
        drop(Box::from_raw(chunk));
    }
}

/// Trains a `k`-row dictionary on one layer of a trace.
///
/// # Safety
/// `trace` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cl_dictionary_train(
    trace: *const ClTrace,
    layer: usize,
    k: usize,
    epochs: usize,
    seed: u64,
    out: *mut *mut ClDictionary,
) -> ClStatus {
    guard(|| {
        let t = &handle(trace, "trace")?.0;
        if layer >= t.layers {
            return Err(fail(ClStatus::InvalidArgument, format!("layer {layer} out of range")));
        }
        let cfg = UcdConfig {
            k,
            epochs,
            seed,
            ..UcdConfig::default()
        };
        let (d, _) = ucd::train_ucd(t.layer(layer), t.dim, &cfg)?;
        put_handle(out, ClDictionary(d))
    })
}

/// Reads a dictionary file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cl_dictionary_load(path: *const c_char, out: *mut *mut ClDictionary) -> ClStatus {
    guard(|| {
        let d = Dictionary::load(path_arg(path, "path")?)?;
        put_handle(out, ClDictionary(d))
    })
}

/// Writes a dictionary file.
///
/// # Safety
/// `dict` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cl_dictionary_save(dict: *const ClDictionary, path: *const c_char) -> ClStatus {
    guard(|| {
        handle(dict, "dict")?.0.save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Best-matching row for one embedding of `len` floats and its cosine
/// similarity.
///
/// # Safety
/// `dict` must be a live handle; `x` readable for `len` floats; outputs
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cl_dictionary_assign(
    dict: *const ClDictionary,
    x: *const f32,
    len: usize,
    row: *mut usize,
    similarity: *mut f32,
) -> ClStatus {
    guard(|| {
        let d = &handle(dict, "dict")?.0;
        let x = slice_arg(x, len, "x")?;
        if len != d.dim {
            return Err(fail(ClStatus::InvalidArgument, format!("embedding has {len} values, dictionary width is {}", d.dim)));
        }
        let (r, s) = d.best(x);
        put(row, r, "row")?;
        put(similarity, s, "similarity")
    })
}

/// Releases a dictionary. Null is ignored.
///
/// # Safety
/// `dict` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_dictionary_free(dict: *mut ClDictionary) {
    if !dict.is_null() {
        drop(Box::from_raw(dict));
    }
}

/// Reads a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cl_model_load(path: *const c_char, out: *mut *mut ClModel) -> ClStatus {
    guard(|| {
        let m = RnnModel::load(path_arg(path, "path")?)?;
        put_handle(out, ClModel(m))
    })
}

/// Runs the model over `symbols` and records its hidden states.
///
/// # Safety
/// `model` must be a live handle, `symbols` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cl_model_export_trace(
    model: *const ClModel,
    symbols: *const c_char,
    out: *mut *mut ClTrace,
) -> ClStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let s: Vec<char> = str_arg(symbols, "symbols")?.chars().collect();
        let t = m.export_trace(&s)?;
        put_handle(out, ClTrace(t))
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_model_free(model: *mut ClModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
