//! C interface to `lass-core`.
//!
//! Every function returns a [`LassStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`lass_last_error`]. Objects are
//! opaque handles created by `*_load` or `*_prune` style calls and released
//! with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lass::cli::{run_command, Command};
use lass::config::ExperimentConfig;
use lass::corpus::LangPair;
use lass::evaluation::{translate, DecodeOptions};
use lass::mask::{magnitude_prune, merge_zero_shot, similarity, ParameterMask, PruneScope};
use lass::tensor::Checkpoint;
use lass::transformer::TransformerModel;
use lass::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LassStatus {
    Ok = 0,
    /// Any failure without a more specific code.
    Failed = 1,
    Config = 2,
    Prerequisite = 3,
    Numerical = 4,
    NullArgument = 5,
    InvalidUtf8 = 6,
    Io = 7,
    /// Corrupt or incompatible file contents.
    Format = 8,
    /// Shapes or layouts that do not line up.
    Structure = 9,
    BufferTooSmall = 10,
    /// A Rust panic was caught at the boundary.
    Panic = 11,
}

/// A trained model.
pub struct LassModel(TransformerModel<f32>);

/// A per-pair parameter mask.
pub struct LassMask(ParameterMask);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> LassStatus {
    match err {
        Error::Config { .. } | Error::Usage(_) => LassStatus::Config,
        Error::Prerequisite { .. } => LassStatus::Prerequisite,
        Error::Numerical(_) => LassStatus::Numerical,
        Error::Io { .. } => LassStatus::Io,
        Error::Format { .. } | Error::Parse { .. } => LassStatus::Format,
        Error::Structure(_) => LassStatus::Structure,
        _ => LassStatus::Failed,
    }
}

struct Fail(LassStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LassStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LassStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LassStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LassStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LassStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lass_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lass_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the `lass` pipeline.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lass_model_load(path: *const c_char, out: *mut *mut LassModel) -> LassStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let model = TransformerModel::from_checkpoint(&Checkpoint::load(path)?)?;
        *out = Box::into_raw(Box::new(LassModel(model)));
        Ok(())
    })
}

/// Writes the model as a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lass_model_save(model: *const LassModel, path: *const c_char) -> LassStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        model.0.to_checkpoint(&Default::default()).save(path)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lass_model_free(model: *mut LassModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size and total parameter count.
///
/// # Safety
/// `model` must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lass_model_info(
    model: *const LassModel,
    vocab_size: *mut usize,
    num_params: *mut usize,
) -> LassStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        *out_arg(vocab_size, "vocab_size")? = model.0.config.vocab_size;
        *out_arg(num_params, "num_params")? = model.0.params.num_params();
        Ok(())
    })
}

/// Decodes one source sequence. `src` holds token ids including the
/// language prefix; the output excludes the leading target token and the
/// end token. `mask` may be null for the full model. On
/// `BufferTooSmall`, `out_len` holds the length needed.
///
/// # Safety
/// `src` must point at `src_len` ids and `out` at `out_cap` writable ids.
#[no_mangle]
pub unsafe extern "C" fn lass_translate(
    model: *const LassModel,
    mask: *const LassMask,
    src: *const u32,
    src_len: usize,
    target_token: u32,
    beam_size: usize,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> LassStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let mask = mask.as_ref().map(|m| &m.0);
        if src.is_null() {
            return Err(null("src"));
        }
        let out_len = out_arg(out_len, "out_len")?;
        let source = std::slice::from_raw_parts(src, src_len).to_vec();
        let opts = DecodeOptions {
            beam_size,
            batch_size: 1,
            ..DecodeOptions::default()
        };
        let hyp = translate(&model.0, mask, &[source], target_token, &opts)?.remove(0);
        *out_len = hyp.len();
        if hyp.len() > out_cap {
            return Err(Fail(
                LassStatus::BufferTooSmall,
                format!("output needs {} ids, buffer holds {out_cap}", hyp.len()),
            ));
        }
        if !hyp.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            std::ptr::copy_nonoverlapping(hyp.as_ptr(), out, hyp.len());
        }
        Ok(())
    })
}

fn pair_arg(src: &str, tgt: &str) -> Result<LangPair, Fail> {
    Ok(format!("{src}-{tgt}").parse::<LangPair>()?)
}

/// Magnitude-prunes the model's maskable weights at `alpha` (per tensor when
/// `global` is 0, across all maskable weights otherwise).
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lass_mask_prune(
    model: *const LassModel,
    alpha: f64,
    global: i32,
    src_lang: *const c_char,
    tgt_lang: *const c_char,
    out: *mut *mut LassMask,
) -> LassStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        let pair = pair_arg(str_arg(src_lang, "src_lang")?, str_arg(tgt_lang, "tgt_lang")?)?;
        let scope = if global != 0 { PruneScope::Global } else { PruneScope::PerTensor };
        let mask = magnitude_prune(&model.0.params, alpha, scope, pair)?;
        *out = Box::into_raw(Box::new(LassMask(mask)));
        Ok(())
    })
}

/// Loads a mask file; a failed checksum gives `Format`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lass_mask_load(path: *const c_char, out: *mut *mut LassMask) -> LassStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mask = ParameterMask::load(PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(LassMask(mask)));
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lass_mask_save(mask: *const LassMask, path: *const c_char) -> LassStatus {
    guard(|| {
        let mask = ref_arg(mask, "mask")?;
        mask.0.save(PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a mask. Null is ignored.
///
/// # Safety
/// `mask` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lass_mask_free(mask: *mut LassMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Fraction of maskable weights kept.
///
/// # Safety
/// `mask` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lass_mask_density(mask: *const LassMask, out: *mut f64) -> LassStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(mask, "mask")?.0.density();
        Ok(())
    })
}

/// Share of `a`'s kept weights also kept by `b`.
///
/// # Safety
/// Both masks must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lass_mask_similarity(a: *const LassMask, b: *const LassMask, out: *mut f64) -> LassStatus {
    guard(|| {
        let (a, b) = (ref_arg(a, "a")?, ref_arg(b, "b")?);
        *out_arg(out, "out")? = similarity(&a.0, &b.0)?;
        Ok(())
    })
}

/// Encoder bits of `x_to_pivot` joined with decoder bits of `pivot_to_y`.
///
/// # Safety
/// Both masks must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lass_mask_merge_zero_shot(
    x_to_pivot: *const LassMask,
    pivot_to_y: *const LassMask,
    out: *mut *mut LassMask,
) -> LassStatus {
    guard(|| {
        let enc = ref_arg(x_to_pivot, "x_to_pivot")?;
        let dec = ref_arg(pivot_to_y, "pivot_to_y")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(LassMask(merge_zero_shot(&enc.0, &dec.0)?)));
        Ok(())
    })
}

/// Runs one pipeline command (`gen-data`, `train-base`, ...) against
/// `run_dir`. `config_path` may be null for the defaults; `seed` below zero
/// keeps the configured seeds.
///
/// # Safety
/// Strings must be NUL-terminated; `config_path` may be null.
#[no_mangle]
pub unsafe extern "C" fn lass_run_command(
    command: *const c_char,
    config_path: *const c_char,
    run_dir: *const c_char,
    seed: i64,
    force: i32,
) -> LassStatus {
    guard(|| {
        let cmd: Command = str_arg(command, "command")?.parse()?;
        let run_dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let config = if config_path.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(config_path, "config_path")?))
        };
        let mut cfg = ExperimentConfig::load(config.as_deref(), std::iter::empty())?;
        if seed >= 0 {
            cfg.set_seed(seed as u64);
        }
        run_command(cmd, &cfg, &run_dir, force != 0, &mut std::io::sink())?;
        Ok(())
    })
}
