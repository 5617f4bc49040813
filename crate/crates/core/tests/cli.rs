//! End-to-end runs of the `dupn` binary on the smoke config.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use dupn::config::RunConfig;
use dupn::data::SyntheticWorld;
use dupn::serving::{synthetic_requests, ScoreResponse};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn dupn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dupn"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--set")
        .arg(format!("paths.data_dir={}", dir.join("data").display()))
        .arg("--set")
        .arg(format!("paths.out_dir={}", dir.join("out").display()))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = dupn(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn request_line() -> String {
    let cfg = RunConfig::load(smoke_config()).unwrap();
    let world = SyntheticWorld::new(&cfg.data.world, cfg.data.seed).unwrap();
    serde_json::to_string(&synthetic_requests(&world, 1, 5, 1)[0]).unwrap() + "\n"
}

#[test]
fn every_subcommand_runs_on_the_smoke_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["gen-data", "train", "eval", "gradcheck", "transfer", "attn-dump", "bench"] {
        ok(d, &[cmd]);
    }
    for f in ["train.jsonl", "eval.jsonl", "world.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let out = d.join("out");
    for f in [
        "model.ckpt",
        "train_report.jsonl",
        "eval.jsonl",
        "gradcheck.jsonl",
        "transfer.jsonl",
        "attention_type_time.tsv",
        "attention_cases.jsonl",
        "attention_relevance.json",
        "bench.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let tsv = std::fs::read_to_string(out.join("attention_type_time.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);

    let mut child = Command::new(env!("CARGO_BIN_EXE_dupn"))
        .arg("serve")
        .arg("--config")
        .arg(smoke_config())
        .arg("--set")
        .arg(format!("paths.out_dir={}", out.display()))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let line = request_line();
    child.stdin.take().unwrap().write_all(format!("{line}{line}not json\n").as_bytes()).unwrap();
    let done = child.wait_with_output().unwrap();
    assert!(done.status.success());
    let replies: Vec<&str> = std::str::from_utf8(&done.stdout).unwrap().lines().collect();
    assert_eq!(replies.len(), 3);
    let (a, b): (ScoreResponse, ScoreResponse) = (serde_json::from_str(replies[0]).unwrap(), serde_json::from_str(replies[1]).unwrap());
    assert!(!a.cache_hit && b.cache_hit);
    assert_eq!(a.ctr, b.ctr);
    assert!(replies[2].starts_with("{\"error\""));
}

#[test]
fn same_config_gives_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        ok(d, &["gen-data"]);
        ok(d, &["train"]);
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "data/train.jsonl"), read(b.path(), "data/train.jsonl"));
    assert_eq!(read(a.path(), "out/model.ckpt"), read(b.path(), "out/model.ckpt"));
}

#[test]
fn configuration_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dupn(dir.path(), &["show-config", "--set", "train.speed=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.speed"));

    let out = dupn(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.ckpt"));

    let out = dupn(dir.path(), &["show-config", "--set", "train.epochs=3"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("train.epochs = 3"));
}

#[test]
fn serves_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["train"]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_dupn"))
        .arg("serve")
        .arg("--config")
        .arg(smoke_config())
        .arg("--set")
        .arg(format!("paths.out_dir={}", d.join("out").display()))
        .arg("--set")
        .arg("serve.addr=127.0.0.1:0")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut banner = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut banner).unwrap();
    let addr = banner.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {banner:?}")).to_string();
    let result = std::panic::catch_unwind(|| {
        let stream = TcpStream::connect(&addr).unwrap();
        let mut writer = stream.try_clone().unwrap();
        writer.write_all(request_line().as_bytes()).unwrap();
        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply).unwrap();
        let resp: ScoreResponse = serde_json::from_str(&reply).unwrap();
        assert_eq!(resp.ctr.len(), 5);
    });
    child.kill().unwrap();
    child.wait().unwrap();
    result.unwrap();
}
