//! Run directories: training with checkpoints and loss logs, decoding to
//! n-best lists, rescoring, and scoring against references.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::deliberation::{rerank, rescore, Deliberation};
use crate::error::{Error, Result};
use crate::eval::{score_corpus, ScoredPair, WerReport};
use crate::params::{NamedTensors, ParamStore};
use crate::rng::SeededRng;
use crate::search::{beam_search, frame_sample, greedy_decode, Hypothesis, NBestList, MAX_SYMBOLS_PER_FRAME};
use crate::synth::Split;
use crate::tokenizer::WordpieceVocab;
use crate::train::{
    build_vocab, load_examples, DelibTrainer, Example, FirstPassTrainer, FrozenFirstPass, StepLog, EMA_PREFIX,
    FIRST_PASS_PREFIX,
};
use crate::transducer::EncoderSource;

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOSS_FILE: &str = "loss.tsv";
pub const FINAL_CKPT: &str = "final.ckpt";

pub fn step_ckpt_name(step: u64) -> String {
    format!("step-{step:07}.ckpt")
}

/// Latest `step-*.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best = None;
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(num) = name.strip_prefix("step-").and_then(|r| r.strip_suffix(".ckpt")) else { continue };
        if let Ok(step) = num.parse::<u64>() {
            if best.as_ref().map_or(true, |(s, _)| step > *s) {
                best = Some((step, p));
            }
        }
    }
    Ok(best)
}

fn write_config(dir: &Path, cfg: &RunConfig, header: &str) -> Result<()> {
    let mut text = String::new();
    for l in header.lines() {
        text.push_str("# ");
        text.push_str(l);
        text.push('\n');
    }
    text.push_str(&cfg.to_toml());
    fs::write(dir.join(CONFIG_FILE), text)?;
    Ok(())
}

/// Config and vocabulary stored next to a checkpoint.
pub fn load_run_files(ckpt: &Path) -> Result<(RunConfig, WordpieceVocab)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::from_file(&dir.join(CONFIG_FILE), &[])?;
    let vocab = WordpieceVocab::load(&dir.join(VOCAB_FILE))
        .map_err(|e| Error::invalid(format!("cannot load {}: {e}", dir.join(VOCAB_FILE).display())))?;
    Ok((cfg, vocab))
}

fn read_checkpoint(path: &Path) -> Result<NamedTensors> {
    if !path.is_file() {
        return Err(Error::invalid(format!("missing checkpoint {}", path.display())));
    }
    NamedTensors::load(path)
}

/// Keep only log lines up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .filter(|l| {
            l.split('\t')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

trait Trainer {
    fn step_count(&self) -> u64;
    fn step(&mut self, data: &[Example]) -> Result<StepLog>;
    fn checkpoint(&self) -> NamedTensors;
    fn restore(&mut self, t: &NamedTensors) -> Result<()>;
}

impl Trainer for FirstPassTrainer {
    fn step_count(&self) -> u64 {
        FirstPassTrainer::step_count(self)
    }
    fn step(&mut self, data: &[Example]) -> Result<StepLog> {
        FirstPassTrainer::step(self, data)
    }
    fn checkpoint(&self) -> NamedTensors {
        FirstPassTrainer::checkpoint(self)
    }
    fn restore(&mut self, t: &NamedTensors) -> Result<()> {
        FirstPassTrainer::restore(self, t)
    }
}

impl Trainer for DelibTrainer {
    fn step_count(&self) -> u64 {
        DelibTrainer::step_count(self)
    }
    fn step(&mut self, data: &[Example]) -> Result<StepLog> {
        DelibTrainer::step(self, data)
    }
    fn checkpoint(&self) -> NamedTensors {
        DelibTrainer::checkpoint(self)
    }
    fn restore(&mut self, t: &NamedTensors) -> Result<()> {
        DelibTrainer::restore(self, t)
    }
}

fn run_loop(
    tr: &mut dyn Trainer,
    out: &Path,
    data: &[Example],
    steps: u64,
    every: u64,
    resume: bool,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    let log_path = out.join(LOSS_FILE);
    if resume {
        if let Some((_, path)) = latest_checkpoint(out)? {
            tr.restore(&read_checkpoint(&path)?)?;
        }
        truncate_log(&log_path, tr.step_count())?;
    } else if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    while tr.step_count() < steps {
        let s = tr.step(data)?;
        writeln!(log, "{}\t{:.6}\t{:e}", s.step, s.loss, s.lr)?;
        progress(&s);
        if s.step % every == 0 {
            tr.checkpoint().save(&out.join(step_ckpt_name(s.step)))?;
        }
    }
    log.flush()?;
    tr.checkpoint().save(&out.join(FINAL_CKPT))?;
    Ok(())
}

/// Train the first pass on the `train` split of `data`. With `resume`, the
/// latest step checkpoint in `out` is restored first.
pub fn run_first_pass(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    header: &str,
    resume: bool,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    fs::create_dir_all(out)?;
    let vocab = build_vocab(data, &cfg.tokenizer)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_config(out, cfg, header)?;
    let train = load_examples(data, Split::Train, Some(&vocab))?;
    let mut tr = FirstPassTrainer::new(cfg, vocab.len())?;
    run_loop(&mut tr, out, &train, cfg.train.steps, cfg.train.checkpoint_every, resume, progress)
}

/// Load the EMA weights of a first-pass checkpoint for decoding.
pub fn load_first_pass(ckpt: &Path) -> Result<(RunConfig, WordpieceVocab, FrozenFirstPass)> {
    let (cfg, vocab) = load_run_files(ckpt)?;
    let t = read_checkpoint(ckpt)?;
    let fp = FrozenFirstPass::from_tensors(&cfg, vocab.len(), &t, EMA_PREFIX)?;
    Ok((cfg, vocab, fp))
}

/// Train the rescorer on top of a frozen first pass. The first-pass
/// checkpoint is only read.
pub fn run_delib(
    cfg: &RunConfig,
    first_pass_ckpt: &Path,
    data: &Path,
    out: &Path,
    header: &str,
    resume: bool,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    let (fp_cfg, vocab, fp) = load_first_pass(first_pass_ckpt)?;
    if fp_cfg.encoder != cfg.encoder || fp_cfg.transducer != cfg.transducer {
        return Err(Error::Config(
            "encoder/transducer settings differ from the first-pass run".into(),
        ));
    }
    fs::create_dir_all(out)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_config(out, cfg, header)?;
    let train = load_examples(data, Split::Train, Some(&vocab))?;
    let mut tr = DelibTrainer::new(cfg, vocab.len(), fp, &train)?;
    run_loop(
        &mut tr,
        out,
        &train,
        cfg.delib_train.steps,
        cfg.delib_train.checkpoint_every,
        resume,
        progress,
    )
}

/// Rescorer (EMA weights) with the first pass it was trained against.
pub struct LoadedDelib {
    pub cfg: RunConfig,
    pub vocab: WordpieceVocab,
    pub first_pass: FrozenFirstPass,
    pub model: Deliberation,
    pub store: ParamStore,
}

pub fn load_delib(ckpt: &Path) -> Result<LoadedDelib> {
    let (cfg, vocab) = load_run_files(ckpt)?;
    let t = read_checkpoint(ckpt)?;
    let first_pass = FrozenFirstPass::from_tensors(&cfg, vocab.len(), &t, FIRST_PASS_PREFIX)?;
    let mut store = ParamStore::new();
    let model = Deliberation::new(&mut store, "delib", &cfg.delib_config(vocab.len()), &mut SeededRng::new(0))?;
    store.load_named(&t, EMA_PREFIX)?;
    Ok(LoadedDelib {
        cfg,
        vocab,
        first_pass,
        model,
        store,
    })
}

/// Beam search every example; `beam == 1` runs greedy decoding.
pub fn decode_examples(
    fp: &FrozenFirstPass,
    examples: &[Example],
    source: EncoderSource,
    beam: usize,
) -> Result<Vec<NBestList>> {
    if source == EncoderSource::Noncausal && fp.model.encoder.cfg.noncausal_layers == 0 {
        return Err(Error::invalid("this model has no non-causal encoder"));
    }
    examples
        .par_iter()
        .map(|ex| {
            let enc = fp.encode(&ex.features, source)?;
            let hyps = if beam == 1 {
                vec![greedy_decode(&fp.model, &fp.store, &enc, MAX_SYMBOLS_PER_FRAME)?]
            } else {
                beam_search(&fp.model, &fp.store, &enc, beam, MAX_SYMBOLS_PER_FRAME)?
            };
            Ok(NBestList {
                utt_id: ex.id.clone(),
                hyps,
            })
        })
        .collect()
}

/// Rescore n-best lists and rerank with weight `lambda` on the first pass.
/// The text encoder reads a frame-sampled hypothesis drawn from the first
/// pass with a per-utterance seed.
pub fn rescore_lists(
    d: &LoadedDelib,
    examples: &[Example],
    lists: &[NBestList],
    lambda: f64,
    seed: u64,
) -> Result<Vec<NBestList>> {
    let by_id: std::collections::HashMap<&str, (usize, &Example)> =
        examples.iter().enumerate().map(|(i, e)| (e.id.as_str(), (i, e))).collect();
    let source = d.cfg.delib.source;
    lists
        .par_iter()
        .map(|l| {
            let &(idx, ex) = by_id
                .get(l.utt_id.as_str())
                .ok_or_else(|| Error::invalid(format!("n-best id {} not in the feature set", l.utt_id)))?;
            let audio = d.first_pass.encode(&ex.features, source)?;
            let mut rng = SeededRng::stream(seed, idx as u64);
            let sampled = frame_sample(&d.first_pass.model, &d.first_pass.store, &audio, &mut rng, 1.0)?;
            let ctx = d.model.context(&d.store, &audio, &sampled.tokens)?;
            Ok(NBestList {
                utt_id: l.utt_id.clone(),
                hyps: rescore(&d.model, &d.store, &ctx, &l.hyps, lambda)?,
            })
        })
        .collect()
}

/// Re-sort already rescored lists under a different `lambda`.
pub fn rerank_lists(lists: &[NBestList], lambda: f64) -> Result<Vec<NBestList>> {
    lists
        .iter()
        .map(|l| {
            if l.hyps.iter().any(|h| h.delib_logp.is_none()) {
                return Err(Error::invalid(format!("{} has hypotheses without rescorer scores", l.utt_id)));
            }
            let mut hyps = l.hyps.clone();
            rerank(&mut hyps, lambda);
            Ok(NBestList {
                utt_id: l.utt_id.clone(),
                hyps,
            })
        })
        .collect()
}

pub fn hyp_text(vocab: &WordpieceVocab, h: &Hypothesis) -> Result<String> {
    vocab.decode(&h.tokens)
}

/// Top hypothesis text of each list, keyed by utterance id.
pub fn top_texts(vocab: &WordpieceVocab, lists: &[NBestList]) -> Result<Vec<(String, String)>> {
    lists
        .iter()
        .map(|l| {
            let top = l
                .hyps
                .first()
                .ok_or_else(|| Error::invalid(format!("empty n-best list for {}", l.utt_id)))?;
            Ok((l.utt_id.clone(), hyp_text(vocab, top)?))
        })
        .collect()
}

/// Per-language WER of `hyps` (id, text) against the examples.
pub fn score_texts(model_id: &str, examples: &[Example], hyps: &[(String, String)]) -> Result<WerReport> {
    let map: std::collections::HashMap<&str, &str> = hyps.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let pairs = examples
        .iter()
        .map(|e| {
            let hyp = map
                .get(e.id.as_str())
                .ok_or_else(|| Error::invalid(format!("no hypothesis for {}", e.id)))?;
            Ok(ScoredPair {
                language: &e.language,
                reference: &e.text,
                hypothesis: hyp,
                logographic: e.logographic,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    score_corpus(model_id, None, &pairs)
}

/// Oracle: per list, the hypothesis with the fewest errors against the
/// reference (first such in list order).
pub fn oracle_texts(vocab: &WordpieceVocab, examples: &[Example], lists: &[NBestList]) -> Result<Vec<(String, String)>> {
    let by_id: std::collections::HashMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    lists
        .iter()
        .map(|l| {
            let ex = by_id
                .get(l.utt_id.as_str())
                .ok_or_else(|| Error::invalid(format!("no reference for {}", l.utt_id)))?;
            let r = crate::eval::scoring_units(&ex.text, ex.logographic);
            let mut best: Option<(usize, String)> = None;
            for h in &l.hyps {
                let text = hyp_text(vocab, h)?;
                let errs = crate::eval::wer(&r, &crate::eval::scoring_units(&text, ex.logographic))?.errors();
                if best.as_ref().map_or(true, |(e, _)| errs < *e) {
                    best = Some((errs, text));
                }
            }
            let (_, text) = best.ok_or_else(|| Error::invalid(format!("empty n-best list for {}", l.utt_id)))?;
            Ok((l.utt_id.clone(), text))
        })
        .collect()
}
