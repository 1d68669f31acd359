//! C ABI over the `gvilm` library.
//!
//! Objects cross the boundary as opaque handles made by the `*_default`,
//! `*_load`, `*_generate` and `gvilm_train` functions and released with the
//! matching `*_free`. Every fallible function returns a [`GvilmStatus`]. On
//! failure, [`gvilm_last_error`] returns a message for the calling thread.
//! Panics are caught and reported as [`GvilmStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gvilm::config::Config;
use gvilm::encoders::{EncodeOptions, Model};
use gvilm::eval;
use gvilm::synthcorpus::{generate_corpus, Corpus, CorpusSpec, Split, VideoTensor};
use gvilm::trainer::{self, load_checkpoint, TrainOptions};
use gvilm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvilmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Argument = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    HashMismatch = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Corpus splits, numbered as in corpus files.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvilmSplit {
    Train = 0,
    Val = 1,
    Test = 2,
    Probe = 3,
}

impl From<GvilmSplit> for Split {
    fn from(s: GvilmSplit) -> Self {
        match s {
            GvilmSplit::Train => Split::Train,
            GvilmSplit::Val => Split::Val,
            GvilmSplit::Test => Split::Test,
            GvilmSplit::Probe => Split::Probe,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GvilmRetrieval {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub pool: usize,
}

pub struct GvilmConfig(Config);
pub struct GvilmCorpus(Corpus);
pub struct GvilmModel(Model<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GvilmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => GvilmStatus::Config,
            Error::Argument(_) => GvilmStatus::Argument,
            Error::Numeric(_) => GvilmStatus::Numeric,
            Error::Format(_) | Error::Json(_) => GvilmStatus::Format,
            Error::HashMismatch { .. } => GvilmStatus::HashMismatch,
            Error::Io(_) => GvilmStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GvilmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GvilmStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            GvilmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(GvilmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GvilmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Failure> {
    let slot = as_mut(out, "output pointer")?;
    *slot = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn out_slice<'a>(p: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], Failure> {
    if p.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Failure(
            GvilmStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gvilm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gvilm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gvilm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn gvilm_config_default(out: *mut *mut GvilmConfig) -> GvilmStatus {
    guard(|| put(out, GvilmConfig(Config::default())))
}

/// Parses a key-value config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gvilm_config_load(path: *const c_char, out: *mut *mut GvilmConfig) -> GvilmStatus {
    guard(|| {
        let path = PathBuf::from(as_str(path, "path")?);
        put(out, GvilmConfig(Config::from_file(&path)?))
    })
}

/// Sets one key; the config is revalidated and left unchanged on failure.
///
/// # Safety
/// `cfg` must be a live config handle; `key` and `value` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gvilm_config_set(
    cfg: *mut GvilmConfig,
    key: *const c_char,
    value: *const c_char,
) -> GvilmStatus {
    guard(|| {
        let cfg = as_mut(cfg, "config")?;
        let mut next = cfg.0.clone();
        next.set(as_str(key, "key")?, as_str(value, "value")?)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Hex hash of the config; free the result with `gvilm_string_free`.
///
/// # Safety
/// `cfg` must be a live config handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gvilm_config_hash(cfg: *const GvilmConfig, out: *mut *mut c_char) -> GvilmStatus {
    guard(|| {
        let cfg = as_ref(cfg, "config")?;
        let slot = as_mut(out, "output pointer")?;
        *slot = CString::new(cfg.0.hash()).expect("hex").into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a config handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gvilm_config_free(cfg: *mut GvilmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates a corpus with default scene parameters.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gvilm_corpus_generate(size: usize, seed: u64, out: *mut *mut GvilmCorpus) -> GvilmStatus {
    guard(|| {
        let spec = CorpusSpec {
            size,
            ..CorpusSpec::default()
        };
        put(out, GvilmCorpus(generate_corpus(&spec, seed)?))
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gvilm_corpus_load(path: *const c_char, out: *mut *mut GvilmCorpus) -> GvilmStatus {
    guard(|| {
        let path = PathBuf::from(as_str(path, "path")?);
        put(out, GvilmCorpus(Corpus::load(&path)?))
    })
}

/// # Safety
/// `corpus` must be a live corpus handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gvilm_corpus_save(corpus: *const GvilmCorpus, path: *const c_char) -> GvilmStatus {
    guard(|| {
        let c = as_ref(corpus, "corpus")?;
        c.0.save(&PathBuf::from(as_str(path, "path")?))?;
        Ok(())
    })
}

/// Number of items in the corpus, or 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live corpus handle.
#[no_mangle]
pub unsafe extern "C" fn gvilm_corpus_len(corpus: *const GvilmCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.items.len())
}

/// # Safety
/// `corpus` must be null or a corpus handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gvilm_corpus_free(corpus: *mut GvilmCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains to completion. With a non-null `out_dir`, the metrics log and
/// checkpoints are written there.
///
/// # Safety
/// Handles must be live; `out_dir` null or NUL-terminated; `out` a valid
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn gvilm_train(
    cfg: *const GvilmConfig,
    corpus: *const GvilmCorpus,
    out_dir: *const c_char,
    out: *mut *mut GvilmModel,
) -> GvilmStatus {
    guard(|| {
        let cfg = as_ref(cfg, "config")?;
        let corpus = as_ref(corpus, "corpus")?;
        let dir = if out_dir.is_null() {
            None
        } else {
            let d = PathBuf::from(as_str(out_dir, "out_dir")?);
            std::fs::create_dir_all(&d).map_err(Error::from)?;
            Some(d)
        };
        let opts = TrainOptions {
            out_dir: dir,
            ..TrainOptions::default()
        };
        let o = trainer::train(&cfg.0, &corpus.0, &opts)?;
        put(out, GvilmModel(o.state.model))
    })
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn gvilm_model_load(path: *const c_char, out: *mut *mut GvilmModel) -> GvilmStatus {
    guard(|| {
        let ck = load_checkpoint(&PathBuf::from(as_str(path, "path")?))?;
        put(out, GvilmModel(ck.model()?))
    })
}

/// Dimension of the shared embedding space, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn gvilm_model_embed_dim(model: *const GvilmModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().common_dim)
}

/// # Safety
/// `model` must be null or a model handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gvilm_model_free(model: *mut GvilmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Unit-norm caption embedding written to `out[0..embed_dim]`.
///
/// # Safety
/// `model` must be live, `text` NUL-terminated, `out` valid for `out_len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn gvilm_encode_text(
    model: *const GvilmModel,
    text: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> GvilmStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let ids = m.vocab().tokenize(as_str(text, "text")?);
        let e = m.encode_text(&ids)?;
        let dst = out_slice(out, out_len, e.len())?;
        dst.iter_mut().zip(&e).for_each(|(d, &x)| *d = x as f32);
        Ok(())
    })
}

/// Unit-norm video embedding of a `frames × height × width × 3` RGB clip in
/// `[0, 1]`, written to `out[0..embed_dim]`. Assignments are hard and
/// noiseless.
///
/// # Safety
/// `model` must be live, `data` valid for `frames·height·width·3` floats,
/// `out` valid for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn gvilm_encode_video(
    model: *const GvilmModel,
    data: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> GvilmStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        if data.is_null() {
            return Err(null("video data"));
        }
        let n = frames * height * width * 3;
        let video = VideoTensor::new(frames, height, width, std::slice::from_raw_parts(data, n).to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = m.encode_video(&video, EncodeOptions::eval(m.config().gumbel_temp), &mut rng)?;
        let dst = out_slice(out, out_len, o.f_v.len())?;
        dst.iter_mut().zip(&o.f_v).for_each(|(d, &x)| *d = x as f32);
        Ok(())
    })
}

/// Text-to-video retrieval over one corpus split.
///
/// # Safety
/// Handles must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gvilm_eval_retrieval(
    model: *const GvilmModel,
    corpus: *const GvilmCorpus,
    split: GvilmSplit,
    out: *mut GvilmRetrieval,
) -> GvilmStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let c = &as_ref(corpus, "corpus")?.0;
        let slot = as_mut(out, "output pointer")?;
        let (_, r) = eval::evaluate_retrieval(m, c, split.into())?;
        *slot = GvilmRetrieval {
            r1: r.r1,
            r5: r.r5,
            r10: r.r10,
            medr: r.medr,
            pool: r.pool,
        };
        Ok(())
    })
}

/// Worst gradient-check relative error per loss, in the order temporal,
/// grounding, contrastive, total.
///
/// # Safety
/// `out` must be valid for 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn gvilm_gradcheck(seed: u64, out: *mut f64) -> GvilmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let r = trainer::gradcheck(seed)?;
        let dst = std::slice::from_raw_parts_mut(out, 4);
        for (d, c) in dst.iter_mut().zip(&r.checks) {
            *d = c.max_rel_err;
        }
        Ok(())
    })
}
