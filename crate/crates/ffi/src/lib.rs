//! C ABI for loading checkpoints, preloading demonstrations into a
//! compressive memory and decoding with it.
//!
//! Every fallible call returns a [`CmrStatus`]. On failure the message is
//! kept per thread and read back with [`cmr_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cmr_core::cmr::{Combine, CompressiveMemory, MemoryError};
use cmr_core::data::Vocab;
use cmr_core::model::{Checkpoint, Model, ModelError};
use cmr_core::pipeline::{preload_demos, PipelineError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

/// A model and its vocabulary.
pub struct CmrModel {
    model: Model,
    vocab: Vocab,
}

/// A compressive memory sized for one model.
pub struct CmrMemory {
    memory: CompressiveMemory,
}

impl CmrMemory {
    /// The wrapped memory, for Rust callers linking the rlib.
    pub fn memory(&self) -> &CompressiveMemory {
        &self.memory
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CmrStatus, String);

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Io(_) => CmrStatus::Io,
            _ => CmrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<MemoryError> for Failure {
    fn from(e: MemoryError) -> Self {
        let status = match e {
            MemoryError::Io(_) => CmrStatus::Io,
            _ => CmrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::NonFinite { .. } => CmrStatus::Numeric,
            _ => CmrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(CmrStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> CmrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CmrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CmrStatus::Internal
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(CmrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn non_null_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(CmrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    let s = non_null(p, "path")?;
    let s = CStr::from_ptr(s).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn ids_arg(tokens: *const u32, len: usize, vocab: usize) -> Result<Vec<usize>, Failure> {
    if len == 0 {
        return Err(invalid("token sequence is empty"));
    }
    let s = std::slice::from_raw_parts(non_null(tokens, "tokens")?, len);
    s.iter()
        .map(|&t| {
            let t = t as usize;
            if t < vocab {
                Ok(t)
            } else {
                Err(invalid(&format!("token id {t} out of range for vocabulary of {vocab}")))
            }
        })
        .collect()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn cmr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmr_version() -> *const c_char {
    static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr().cast()
}

/// Loads a checkpoint written by `cmr train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmr_model_load(path: *const c_char, out: *mut *mut CmrModel) -> CmrStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let ck = Checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CmrModel {
            model: ck.model,
            vocab: ck.vocab,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cmr_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn cmr_model_free(model: *mut CmrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmr_model_vocab_size(model: *const CmrModel) -> usize {
    model.as_ref().map_or(0, |m| m.vocab.len())
}

/// Id of `token`, or the unknown-token id.
///
/// # Safety
/// `model` must be a live handle and `token` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cmr_model_token_id(model: *const CmrModel, token: *const c_char, out: *mut u32) -> CmrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = non_null_mut(out, "out")?;
        let t = CStr::from_ptr(non_null(token, "token")?).to_str().map_err(|_| invalid("token is not UTF-8"))?;
        *out = m.vocab.id(t) as u32;
        Ok(())
    })
}

/// Creates an empty memory sized for `model`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmr_memory_new(model: *const CmrModel, out: *mut *mut CmrMemory) -> CmrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = non_null_mut(out, "out")?;
        *out = Box::into_raw(Box::new(CmrMemory {
            memory: m.model.empty_memory(),
        }));
        Ok(())
    })
}

/// # Safety
/// `memory` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn cmr_memory_free(memory: *mut CmrMemory) {
    if !memory.is_null() {
        drop(Box::from_raw(memory));
    }
}

/// Number of demonstrations stored so far.
///
/// # Safety
/// `memory` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmr_memory_stored_count(memory: *const CmrMemory) -> usize {
    memory.as_ref().map_or(0, |m| m.memory.stored_count())
}

/// Replaces `memory` with the batched preload of `n_demos` demonstrations.
/// Demonstration `i` is `tokens[offsets[i]..offsets[i + 1]]`, so `offsets`
/// holds `n_demos + 1` entries. `sum` selects summing instead of averaging
/// each batch.
///
/// # Safety
/// All pointers must be valid for the lengths they describe.
#[no_mangle]
pub unsafe extern "C" fn cmr_memory_preload(
    model: *const CmrModel,
    memory: *mut CmrMemory,
    tokens: *const u32,
    offsets: *const usize,
    n_demos: usize,
    demo_batch_size: usize,
    sum: bool,
) -> CmrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let mem = non_null_mut(memory, "memory")?;
        let offsets = std::slice::from_raw_parts(non_null(offsets, "offsets")?, n_demos + 1);
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("offsets must be strictly increasing"));
        }
        let all = ids_arg(tokens, offsets[n_demos], m.vocab.len())?;
        let demos: Vec<&[usize]> = offsets.windows(2).map(|w| &all[w[0]..w[1]]).collect();
        let combine = if sum { Combine::Sum } else { Combine::Mean };
        mem.memory = preload_demos(&m.model, &demos, demo_batch_size, combine)?;
        Ok(())
    })
}

/// Writes a bitwise-exact snapshot of `memory`.
///
/// # Safety
/// `memory` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cmr_memory_save(memory: *const CmrMemory, path: *const c_char) -> CmrStatus {
    guard(|| {
        let mem = non_null(memory, "memory")?;
        mem.memory.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Reads a snapshot written by [`cmr_memory_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmr_memory_load(path: *const c_char, out: *mut *mut CmrMemory) -> CmrStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let memory = CompressiveMemory::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CmrMemory { memory }));
        Ok(())
    })
}

/// Greedy decoding of `input` reading `memory` (null reads nothing).
/// Writes up to `capacity` ids to `out` and the full length to `out_len`;
/// returns `BufferTooSmall` when they do not fit.
///
/// # Safety
/// Pointers must be valid for the lengths given; `memory` may be null.
#[no_mangle]
pub unsafe extern "C" fn cmr_decode(
    model: *const CmrModel,
    memory: *const CmrMemory,
    input: *const u32,
    input_len: usize,
    max_new: usize,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> CmrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out_len = non_null_mut(out_len, "out_len")?;
        let ids = ids_arg(input, input_len, m.vocab.len())?;
        let mem = memory.as_ref().map(|h| &h.memory);
        let decoded = m.model.greedy_decode(&ids, mem, max_new)?;
        *out_len = decoded.len();
        if decoded.len() > capacity {
            return Err(Failure(
                CmrStatus::BufferTooSmall,
                format!("{} ids do not fit in {capacity}", decoded.len()),
            ));
        }
        if !decoded.is_empty() {
            let dst = std::slice::from_raw_parts_mut(non_null_mut(out, "out")?, capacity);
            for (d, &t) in dst.iter_mut().zip(&decoded) {
                *d = t as u32;
            }
        }
        Ok(())
    })
}
