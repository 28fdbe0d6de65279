#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn zrforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zrforge"))
        .args(args)
        .env("ZRFORGE_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs the command and fails the test with its stderr unless it succeeds.
pub fn ok(args: &[&str]) -> String {
    let out = zrforge(args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

pub fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// First evaluation timestamp recorded by `synth`.
pub fn planted_split(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("planted.json")).expect("planted.json");
    let v: serde_json::Value = serde_json::from_str(&text).expect("planted json");
    v["split_timestamp"].as_str().expect("label").to_owned()
}

/// Flags shared by one pipeline run.
pub struct Run<'a> {
    pub seed: &'a str,
    pub threads: &'a str,
    pub synth: &'a [&'a str],
    pub threshold: &'a str,
    pub train: &'a [&'a str],
}

/// synth, split, embed-mock, train and eval in `root`; returns the report
/// JSON text.
pub fn pipeline(root: &Path, run: &Run<'_>) -> String {
    let raw = root.join("raw");
    let data = root.join("data");
    let ckpt = root.join("model.ckpt");
    let report = root.join("report.json");
    let common = ["--seed", run.seed, "--threads", run.threads];
    let mut args = vec!["synth", "--out-dir", path(&raw)];
    args.extend_from_slice(run.synth);
    args.extend_from_slice(&common);
    ok(&args);
    let split_ts = planted_split(&raw);
    let quads = raw.join("quadruples.tsv");
    ok(&[
        "split",
        "--input",
        path(&quads),
        "--split-ts",
        &split_ts,
        "--threshold",
        run.threshold,
        "--out-dir",
        path(&data),
    ]);
    let mut args = vec!["embed-mock", "--data-dir", path(&data)];
    args.extend_from_slice(&common);
    ok(&args);
    let mut args = vec!["train", "--data-dir", path(&data), "--out", path(&ckpt)];
    args.extend_from_slice(run.train);
    args.extend_from_slice(&common);
    ok(&args);
    let mut args = vec![
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--data-dir",
        path(&data),
        "--out",
        path(&report),
    ];
    args.extend_from_slice(&common);
    ok(&args);
    std::fs::read_to_string(report).expect("report written")
}
