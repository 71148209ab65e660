#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn replay_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay")
}

/// Runs the CLI in-process; returns the exit code and captured stdout.
pub fn qqa(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("qqa").chain(args.iter().copied());
    let code = qqa_cli::main_with_args(argv, &mut out);
    (code, String::from_utf8(out).expect("stdout is UTF-8"))
}

/// Runs the built binary; used where stderr or the process exit code matters.
pub fn qqa_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qqa"))
        .args(args)
        .output()
        .expect("qqa binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Offline prediction over the replay fixture into `out`.
pub fn replay_predict(out: &Path) -> (i32, String) {
    let dir = replay_dir();
    qqa(&[
        "predict",
        "--corpus",
        s(&dir.join("corpus.jsonl")),
        "--split",
        "test",
        "--provider",
        s(&dir.join("provider.toml")),
        "--cache-dir",
        s(&dir.join("cache")),
        "--offline",
        "--out",
        s(out),
    ])
}
