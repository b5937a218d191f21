//! Helpers for driving the `delib` binary from tests.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_delib"))
}

pub fn output<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    bin().args(args).output().expect("delib runs")
}

/// Run `delib` and return its stdout; panics with stderr on failure.
pub fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let out = output(args);
    if !out.status.success() {
        let shown: Vec<String> = args.iter().map(|a| a.as_ref().to_string_lossy().into_owned()).collect();
        panic!(
            "delib {} failed ({:?}):\n{}",
            shown.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

pub fn sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

/// `relative path -> sha256` for every file under `dir`, sorted.
pub fn tree_digest(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, sha256(&path)));
            }
        }
    }
    out.sort();
    out
}

/// Per-language rows of an evaluate `--tsv` file: `(language, errors, ref_words, wer)`.
pub fn tsv_rows(path: &Path) -> Vec<(String, usize, usize, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("avg"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let n = |i: usize| f[i].parse::<usize>().unwrap();
            (f[0].to_string(), n(1) + n(2) + n(3), n(4), f[5].parse().unwrap())
        })
        .collect()
}

/// Unweighted mean over languages, recomputed from the error counts.
pub fn tsv_avg(path: &Path) -> f64 {
    let rows = tsv_rows(path);
    rows.iter().map(|r| 100.0 * r.1 as f64 / r.2 as f64).sum::<f64>() / rows.len() as f64
}

pub fn grids_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/grids")
}

/// A two-language corpus small enough for seconds-long runs.
pub const SMALL_SPEC: &str = r#"seed = 3

[[language]]
name = "xa"
script = "alphabetic"
utterances = 60
min_len = 1
max_len = 3

[[language]]
name = "xc"
script = "logographic"
utterances = 30
min_len = 2
max_len = 4
"#;

fn sets(items: Vec<String>) -> Vec<String> {
    items.into_iter().flat_map(|s| ["--set".to_string(), s]).collect()
}

/// Overrides that shorten both training runs of the tiny preset.
pub fn short_run(steps: u64) -> Vec<String> {
    sets(vec![
        format!("train.steps={steps}"),
        format!("train.checkpoint_every={}", steps.div_ceil(2)),
        format!("delib_train.steps={steps}"),
        format!("delib_train.checkpoint_every={}", steps.div_ceil(2)),
    ])
}

/// A vocabulary that fits [`SMALL_SPEC`].
pub fn small_vocab() -> Vec<String> {
    sets(vec!["tokenizer.vocab_size=64".into(), "tokenizer.count_threshold=3".into()])
}
