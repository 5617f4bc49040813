//! C ABI for the serving engine.
//!
//! Every function returns a [`DupnStatus`]; on failure the message is kept
//! per thread and read with [`dupn_last_error_message`]. Strings handed out
//! by the library are freed with [`dupn_string_free`], engines with
//! [`dupn_engine_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dupn::config::RunConfig;
use dupn::numeric::Checkpoint;
use dupn::serving::{ScoreRequest, ServingEngine};
use dupn::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DupnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Fingerprint = 6,
    Io = 7,
    Numeric = 8,
    Panic = 9,
}

/// Opaque engine handle.
pub struct DupnEngine {
    inner: ServingEngine,
}

/// Counter snapshot of an engine.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DupnStats {
    pub requests: u64,
    pub score_calls: u64,
    pub encode_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub hit_rate: f64,
    pub mean_latency_us: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DupnStatus {
    match e {
        Error::Config(_) => DupnStatus::Config,
        Error::Data(_) | Error::DataLine { .. } | Error::Metric(_) => DupnStatus::Data,
        Error::Checkpoint(_) => DupnStatus::Checkpoint,
        Error::Fingerprint { .. } => DupnStatus::Fingerprint,
        Error::Io(_) => DupnStatus::Io,
        Error::Shape { .. } | Error::NonFinite { .. } | Error::Diverged { .. } => DupnStatus::Numeric,
    }
}

struct Failure(DupnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DupnStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let (status, msg) = match outcome {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            return DupnStatus::Ok;
        }
        Ok(Err(Failure(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (DupnStatus::Panic, format!("panic: {m}"))
        }
    };
    set_error(msg);
    status
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DupnStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DupnStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn null(what: &str) -> Failure {
    Failure(DupnStatus::NullPointer, format!("{what} is null"))
}

/// Loads a checkpoint into a new engine.
///
/// `config_path` names a run config file whose model and `serve.*` keys
/// apply; null uses the built-in defaults. On success `*out` receives the
/// engine; on failure it is set to null.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn dupn_engine_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut DupnEngine,
) -> DupnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(str_arg(config_path, "config_path")?)?
        };
        let ckpt = Checkpoint::load(Path::new(str_arg(checkpoint_path, "checkpoint_path")?))?;
        let inner = ServingEngine::new(&cfg.model, &ckpt, cfg.serve.cache)?;
        *out = Box::into_raw(Box::new(DupnEngine { inner }));
        Ok(())
    })
}

/// Replaces the engine's parameters with another checkpoint of the same
/// architecture and flushes its cache. The old parameters stay on failure.
///
/// # Safety
/// `engine` must come from [`dupn_engine_load`]; `checkpoint_path` must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dupn_engine_reload(engine: *const DupnEngine, checkpoint_path: *const c_char) -> DupnStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let ckpt = Checkpoint::load(Path::new(str_arg(checkpoint_path, "checkpoint_path")?))?;
        engine.inner.reload(&ckpt)?;
        Ok(())
    })
}

/// Releases an engine. Null is a no-op.
///
/// # Safety
/// `engine` must come from [`dupn_engine_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dupn_engine_free(engine: *mut DupnEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Scores one JSON request; `*out_json` receives the JSON response, to be
/// released with [`dupn_string_free`]. The engine may be shared between
/// threads.
///
/// # Safety
/// `engine` must come from [`dupn_engine_load`]; `request_json` must be
/// NUL-terminated; `out_json` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dupn_engine_score_json(
    engine: *const DupnEngine,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> DupnStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        *out_json = ptr::null_mut();
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let req: ScoreRequest = serde_json::from_str(str_arg(request_json, "request_json")?)
            .map_err(|e| Failure(DupnStatus::Data, format!("bad request: {e}")))?;
        let resp = engine.inner.score(&req)?;
        let text = serde_json::to_string(&resp).map_err(|e| Failure(DupnStatus::Data, e.to_string()))?;
        *out_json = CString::new(text).map_err(|e| Failure(DupnStatus::Data, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Writes the engine's counters to `*out`.
///
/// # Safety
/// `engine` must come from [`dupn_engine_load`]; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn dupn_engine_stats(engine: *const DupnEngine, out: *mut DupnStats) -> DupnStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = engine.inner.stats();
        *out = DupnStats {
            requests: s.requests,
            score_calls: s.score_calls,
            encode_calls: s.encode_calls,
            cache_hits: s.cache_hits,
            cache_misses: s.cache_misses,
            hit_rate: s.hit_rate,
            mean_latency_us: s.mean_latency_us,
        };
        Ok(())
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dupn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dupn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
