use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dupn::config::RunConfig;
use dupn::data::{SyntheticWorld, WorldConfig};
use dupn::model::Dupn;
use dupn::numeric::Checkpoint;
use dupn::serving::{synthetic_requests, ScoreResponse};
use dupn_ffi::*;

fn write_checkpoint(dir: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    let (store, model) = Dupn::init(&cfg.model, seed).unwrap();
    let path = dir.join(format!("model{seed}.ckpt"));
    Checkpoint::capture(&store, model.fingerprint(), Default::default()).save(&path).unwrap();
    path
}

fn request_json(candidates: usize) -> String {
    let world = SyntheticWorld::new(&WorldConfig::small(), 2).unwrap();
    serde_json::to_string(&synthetic_requests(&world, 1, candidates, 3)[0]).unwrap()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = dupn_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(ckpt: &Path) -> *mut DupnEngine {
    let mut engine = ptr::null_mut();
    let status = unsafe { dupn_engine_load(ptr::null(), cstr(ckpt).as_ptr(), &mut engine) };
    assert_eq!(status, DupnStatus::Ok);
    assert!(!engine.is_null());
    engine
}

fn score(engine: *const DupnEngine, req: &str) -> ScoreResponse {
    let req = CString::new(req).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { dupn_engine_score_json(engine, req.as_ptr(), &mut out) };
    assert_eq!(status, DupnStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { dupn_string_free(out) };
    serde_json::from_str(&text).unwrap()
}

#[test]
fn load_score_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), &RunConfig::default(), 1);
    let engine = load(&ckpt);
    let req = request_json(25);
    let a = score(engine, &req);
    let b = score(engine, &req);
    assert_eq!(a.ctr.len(), 25);
    assert!(!a.cache_hit && b.cache_hit);
    assert_eq!(a.ctr, b.ctr);
    let mut stats = DupnStats::default();
    assert_eq!(unsafe { dupn_engine_stats(engine, &mut stats) }, DupnStatus::Ok);
    assert_eq!((stats.requests, stats.score_calls, stats.encode_calls, stats.cache_hits), (2, 50, 1, 1));
    assert!(dupn_last_error_message().is_null());
    unsafe { dupn_engine_free(engine) };
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = ptr::null_mut();
    let missing = cstr(&dir.path().join("missing.ckpt"));
    assert_eq!(unsafe { dupn_engine_load(ptr::null(), missing.as_ptr(), &mut engine) }, DupnStatus::Io);
    assert!(engine.is_null());
    assert!(last_error().contains("No such file"));

    assert_eq!(unsafe { dupn_engine_load(ptr::null(), ptr::null(), &mut engine) }, DupnStatus::NullPointer);

    let truncated = dir.path().join("truncated.ckpt");
    let full = write_checkpoint(dir.path(), &RunConfig::default(), 2);
    let bytes = std::fs::read(&full).unwrap();
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(unsafe { dupn_engine_load(ptr::null(), cstr(&truncated).as_ptr(), &mut engine) }, DupnStatus::Checkpoint);
    assert!(engine.is_null());

    let mut other = RunConfig::default();
    other.model.encoder.d_h = 8;
    let foreign = write_checkpoint(dir.path(), &other, 3);
    assert_eq!(unsafe { dupn_engine_load(ptr::null(), cstr(&foreign).as_ptr(), &mut engine) }, DupnStatus::Fingerprint);

    let engine = load(&full);
    let mut out = ptr::null_mut();
    let bad = CString::new("{\"user\": 1}").unwrap();
    assert_eq!(unsafe { dupn_engine_score_json(engine, bad.as_ptr(), &mut out) }, DupnStatus::Data);
    assert!(out.is_null());
    assert!(last_error().starts_with("bad request"));
    assert_eq!(unsafe { dupn_engine_reload(engine, cstr(&foreign).as_ptr()) }, DupnStatus::Fingerprint);
    assert_eq!(unsafe { dupn_engine_stats(ptr::null(), ptr::null_mut()) }, DupnStatus::NullPointer);
    unsafe {
        dupn_engine_free(engine);
        dupn_engine_free(ptr::null_mut());
        dupn_string_free(ptr::null_mut());
    }
}

#[test]
fn reload_swaps_parameters_and_flushes_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let (a, b) = (write_checkpoint(dir.path(), &cfg, 4), write_checkpoint(dir.path(), &cfg, 5));
    let engine = load(&a);
    let req = request_json(3);
    let before = score(engine, &req);
    assert_eq!(unsafe { dupn_engine_reload(engine, cstr(&b).as_ptr()) }, DupnStatus::Ok);
    let after = score(engine, &req);
    assert!(!after.cache_hit);
    assert_ne!(before.ctr, after.ctr);
    unsafe { dupn_engine_free(engine) };
}

#[test]
fn engine_is_shared_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), &RunConfig::default(), 6);
    let engine = load(&ckpt) as usize;
    let req = request_json(10);
    let serial = score(engine as *const DupnEngine, &req);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let req = req.clone();
            std::thread::spawn(move || score(engine as *const DupnEngine, &req))
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().ctr, serial.ctr);
    }
    unsafe { dupn_engine_free(engine as *mut DupnEngine) };
}

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libdupn_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), &RunConfig::default(), 7);
    let req = dir.path().join("request.json");
    std::fs::write(&req, request_json(5)).unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap_or_else(|e| panic!("cannot run C compiler {cc}: {e}"));
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).arg(&ckpt).arg(&req).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "ok\n");
}
