//! Command-line behaviour: exit codes, file formats, reproducibility and the
//! decode/rescore contracts on a small trained model.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use delib_core::pipeline::{hyp_text, load_first_pass};
use delib_core::search::{beam_search, greedy_decode, read_nbest, MAX_SYMBOLS_PER_FRAME};
use delib_core::synth::Split;
use delib_core::train::load_examples;
use delib_core::transducer::EncoderSource;

use common::{output, p, run, sha256, short_run, small_vocab, tree_digest, tsv_rows, SMALL_SPEC};

fn code<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> (i32, String) {
    let out = output(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn with(base: &[&str], extra: &[Vec<String>]) -> Vec<String> {
    let mut v: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    for e in extra {
        v.extend(e.iter().cloned());
    }
    v
}

/// A small corpus with a briefly trained first pass and rescorer, shared by
/// the tests below.
struct Trained {
    root: tempfile::TempDir,
}

impl Trained {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }
    fn s(&self, rel: &str) -> String {
        p(&self.path(rel))
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let t = Trained {
            root: tempfile::tempdir().unwrap(),
        };
        fs::write(t.path("small.toml"), SMALL_SPEC).unwrap();
        run(&["gen-data", "--spec", &t.s("small.toml"), "--out", &t.s("data")]);
        run(&with(
            &["train-first-pass", "--config", "tiny", "--data", &t.s("data"), "--out", &t.s("fp"), "--seed", "4"],
            &[short_run(80), small_vocab()],
        ));
        run(&with(
            &["train-delib", "--config", "tiny", "--first-pass-ckpt", &t.s("fp/final.ckpt"), "--data", &t.s("data")],
            &[vec!["--out".into(), t.s("dl")], short_run(40), small_vocab()],
        ));
        run(&["decode", "--ckpt", &t.s("fp/final.ckpt"), "--data", &t.s("data"), "--out", &t.s("test.nbest")]);
        t
    })
}

fn text_file(path: &Path) -> HashMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (id, t) = l.split_once('\t').unwrap_or((l, ""));
            (id.to_string(), t.to_string())
        })
        .collect()
}

#[test]
fn default_corpus_has_two_thousand_utterances_and_reruns_identically() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let stdout = run(&["gen-data", "--out", &p(&a), "--seed", "9"]);
    assert!(stdout.contains("2000 utterances in 3 languages"), "{stdout}");
    run(&["gen-data", "--out", &p(&b), "--seed", "9"]);
    assert_eq!(tree_digest(&a), tree_digest(&b));
    let lines = fs::read_to_string(a.join("transcripts.tsv")).unwrap();
    assert_eq!(lines.lines().count(), 2000);
    let echo = fs::read_to_string(a.join("corpus.toml")).unwrap();
    assert!(echo.starts_with("# delib ") && echo.contains("seed = 9"));
}

#[test]
fn validation_failures_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let spec = root.path().join("overlap.toml");
    fs::write(
        &spec,
        "[[language]]\nname = \"p\"\nalphabet = \"abc\"\n\n[[language]]\nname = \"q\"\nalphabet = \"cde\"\n",
    )
    .unwrap();
    let (c, err) = code(&["gen-data", "--spec", &p(&spec), "--out", &p(&root.path().join("x"))]);
    assert_eq!(c, 2);
    assert!(err.contains("overlap"), "{err}");
    assert_eq!(code(&["params", "--config", "tiny", "--set", "encoder.colour=3"]).0, 2);
    assert_eq!(code(&["params", "--config", "no-such-preset"]).0, 2);
    let missing = root.path().join("none/final.ckpt");
    let (c, _) = code(&[
        "train-delib", "--config", "tiny", "--first-pass-ckpt", &p(&missing), "--data", &p(root.path()), "--out",
        &p(&root.path().join("dl")),
    ]);
    assert_eq!(c, 2);
    assert_eq!(code(&["decode", "--ckpt", &p(&missing), "--data", ".", "--source", "sideways", "--out", "x"]).0, 2);
}

#[test]
fn numeric_blow_up_exits_with_three() {
    let t = trained();
    let out = tempfile::tempdir().unwrap();
    let (c, err) = code(&with(
        &["train-first-pass", "--config", "tiny", "--data", &t.s("data"), "--out", &p(out.path())],
        &[short_run(3), small_vocab(), vec!["--set".into(), "train.peak_lr=1e300".into()]],
    ));
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn evaluate_aggregates_the_causal_grid() {
    let grid = common::grids_dir().join("causal_first_pass.tsv");
    let out = run(&["evaluate", "--table", &p(&grid)]);
    let footer = out.lines().find(|l| l.starts_with("Avg. WER")).unwrap();
    let values: Vec<&str> = footer.split('|').skip(1).map(str::trim).collect();
    assert_eq!(values, ["8.77", "8.30"]);
}

#[test]
fn identical_hypotheses_score_zero() {
    let t = trained();
    let refs: String = fs::read_to_string(t.path("data/transcripts.tsv"))
        .unwrap()
        .lines()
        .filter(|l| l.split('\t').nth(2) == Some("test"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}\t{}\n", f[0], f[3])
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.tsv");
    fs::write(&hyp, &refs).unwrap();
    let tsv = dir.path().join("wer.tsv");
    let shown = run(&["evaluate", "--hyp", &p(&hyp), "--ref", &t.s("data"), "--tsv", &p(&tsv)]);
    let rows = tsv_rows(&tsv);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.1 == 0 && r.3 == 0.0));
    assert!(shown.lines().filter(|l| l.contains('|') && !l.starts_with("Size")).skip(1).all(|l| l.ends_with("0.00")), "{shown}");
    // a missing utterance is an error
    fs::write(&hyp, refs.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    assert_eq!(code(&["evaluate", "--hyp", &p(&hyp), "--ref", &t.s("data")]).0, 2);
}

#[test]
fn params_prints_exact_and_rounded_counts() {
    let out = run(&["params", "--config", "B1"]);
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    let f: Vec<&str> = total.split('\t').collect();
    let n: u64 = f[1].parse().unwrap();
    assert!(n > 1_000_000, "{n}");
    assert_eq!(f[2], format!("{:.1}M", n as f64 / 1e6));
    assert!(!out.contains("deliberation"), "B1 has no rescorer");
    assert!(run(&["params", "--config", "E1"]).contains("deliberation\t"));
}

#[test]
fn training_logs_lower_loss_and_echoes_config() {
    let t = trained();
    let log = fs::read_to_string(t.path("fp/loss.tsv")).unwrap();
    let loss = |l: &str| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 80);
    assert!(lines.iter().all(|l| l.split('\t').count() == 3));
    assert!(loss(lines[79]) < loss(lines[0]));
    for dir in ["fp", "dl"] {
        let cfg = fs::read_to_string(t.path(&format!("{dir}/config.toml"))).unwrap();
        assert!(cfg.starts_with("# delib ") && cfg.contains("\nencoder.dim = "), "{cfg}");
    }
}

#[test]
fn beam_one_equals_greedy_search() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("greedy.nbest");
    run(&["decode", "--ckpt", &t.s("fp/final.ckpt"), "--data", &t.s("data"), "--beam", "1", "--out", &p(&file)]);
    let lists = read_nbest(&file).unwrap();
    let (_, vocab, fp) = load_first_pass(&t.path("fp/final.ckpt")).unwrap();
    let examples = load_examples(&t.path("data"), Split::Test, Some(&vocab)).unwrap();
    assert_eq!(lists.len(), examples.len());
    for (l, ex) in lists.iter().zip(&examples) {
        let enc = fp.encode(&ex.features, EncoderSource::Noncausal).unwrap();
        let g = greedy_decode(&fp.model, &fp.store, &enc, MAX_SYMBOLS_PER_FRAME).unwrap();
        let b = beam_search(&fp.model, &fp.store, &enc, 1, MAX_SYMBOLS_PER_FRAME).unwrap();
        assert_eq!(l.hyps.len(), 1);
        assert_eq!(l.hyps[0].tokens, g.tokens, "{}", l.utt_id);
        assert_eq!(b[0].tokens, g.tokens, "{}", l.utt_id);
    }
}

#[test]
fn causal_and_noncausal_sources_differ() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<PathBuf> = ["causal", "noncausal"].iter().map(|s| dir.path().join(s)).collect();
    for (src, f) in ["causal", "noncausal"].iter().zip(&files) {
        run(&["decode", "--ckpt", &t.s("fp/final.ckpt"), "--data", &t.s("data"), "--source", src, "--out", &p(f)]);
    }
    assert_ne!(sha256(&files[0]), sha256(&files[1]));
}

#[test]
fn decoding_and_rescoring_rerun_identically() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let go = |tag: &str, workers: &str| {
        let nb = dir.path().join(format!("{tag}.nbest"));
        let rs = dir.path().join(format!("{tag}.rescored"));
        run(&["--workers", workers, "decode", "--ckpt", &t.s("fp/final.ckpt"), "--data", &t.s("data"), "--out", &p(&nb)]);
        run(&[
            "--workers", workers, "rescore", "--delib-ckpt", &t.s("dl/final.ckpt"), "--nbest", &p(&nb), "--data",
            &t.s("data"), "--seed", "5", "--out", &p(&rs),
        ]);
        (sha256(&nb), sha256(&rs))
    };
    let a = go("a", "1");
    assert_eq!(a, go("b", "1"));
    assert_eq!(a, go("c", "3"), "worker count changed the output");
}

#[test]
fn rescoring_permutes_each_list_and_lambda_one_keeps_first_pass_top() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.nbest");
    let sel = dir.path().join("sel.tsv");
    let base = [
        "rescore", "--delib-ckpt", &t.s("dl/final.ckpt"), "--nbest", &t.s("test.nbest"), "--data", &t.s("data"),
    ];
    let mut args: Vec<&str> = base.to_vec();
    args.extend(["--lambda", "1", "--out", out.to_str().unwrap(), "--selection", sel.to_str().unwrap()]);
    run(&args);
    let fp_top = dir.path().join("top.tsv");
    let nbest = read_nbest(&t.path("test.nbest")).unwrap();
    let (_, vocab, _) = load_first_pass(&t.path("fp/final.ckpt")).unwrap();
    let tops: String = nbest
        .iter()
        .map(|l| format!("{}\t{}\n", l.utt_id, hyp_text(&vocab, &l.hyps[0]).unwrap()))
        .collect();
    fs::write(&fp_top, tops).unwrap();
    assert_eq!(text_file(&sel), text_file(&fp_top));

    for lambda in ["0", "0.5"] {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(["--lambda", lambda, "--out", out.to_str().unwrap()]);
        run(&args);
        let rescored = read_nbest(&out).unwrap();
        assert_eq!(rescored.len(), nbest.len());
        for (a, b) in nbest.iter().zip(&rescored) {
            let mut x: Vec<_> = a.hyps.iter().map(|h| h.tokens.clone()).collect();
            let mut y: Vec<_> = b.hyps.iter().map(|h| h.tokens.clone()).collect();
            x.sort();
            y.sort();
            assert_eq!((a.utt_id.as_str(), x), (b.utt_id.as_str(), y));
            assert!(b.hyps.iter().all(|h| h.delib_logp.is_some()));
        }
    }

    // n-best ids must exist in the corpus
    let bad = dir.path().join("bad.nbest");
    let text = fs::read_to_string(t.path("test.nbest")).unwrap().replace("xa-", "zz-");
    fs::write(&bad, text).unwrap();
    let (c, err) = code(&[
        "rescore", "--delib-ckpt", &t.s("dl/final.ckpt"), "--nbest", &p(&bad), "--data", &t.s("data"), "--out", &p(&out),
    ]);
    assert_eq!(c, 2, "{err}");
}

#[test]
fn resumed_runs_match_unbroken_runs() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| p(&dir.path().join(n));
    let fp = |out: &str, steps: u64, resume: bool| {
        let mut args = with(
            &["train-first-pass", "--config", "tiny", "--data", &t.s("data"), "--out", out, "--seed", "6"],
            &[short_run(steps), small_vocab(), vec!["--set".into(), "train.checkpoint_every=5".into()]],
        );
        if resume {
            args.push("--resume".into());
        }
        run(&args);
    };
    fp(&d("whole"), 12, false);
    fp(&d("split"), 7, false);
    fp(&d("split"), 12, true);
    for f in ["loss.tsv", "final.ckpt", "step-0000010.ckpt"] {
        assert_eq!(sha256(&dir.path().join("whole").join(f)), sha256(&dir.path().join("split").join(f)), "{f}");
    }

    let dl = |out: &str, steps: u64, resume: bool| {
        let mut args = with(
            &["train-delib", "--config", "tiny", "--first-pass-ckpt", &d("whole/final.ckpt"), "--data", &t.s("data")],
            &[
                vec!["--out".into(), out.into()],
                short_run(steps),
                small_vocab(),
                vec!["--set".into(), "delib_train.checkpoint_every=4".into()],
            ],
        );
        if resume {
            args.push("--resume".into());
        }
        run(&args);
    };
    dl(&d("dl-whole"), 9, false);
    dl(&d("dl-split"), 5, false);
    dl(&d("dl-split"), 9, true);
    for f in ["loss.tsv", "final.ckpt"] {
        assert_eq!(sha256(&dir.path().join("dl-whole").join(f)), sha256(&dir.path().join("dl-split").join(f)), "{f}");
    }
}
