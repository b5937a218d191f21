//! First-pass decoding: beam search, greedy decoding and per-frame sampling.
//!
//! Within a frame, hypotheses are expanded in up to `max_symbols` rounds.
//! Each round scores every active hypothesis' blank and label extensions,
//! keeps the best `beam` candidates, moves blank-extended ones to the next
//! frame's set (max-merged by label sequence) and keeps expanding the
//! label-extended ones. The final round allows blank only.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::{BLANK, NUM_RESERVED};
use crate::transducer::{FirstPass, PredState};

pub const DEFAULT_BEAM: usize = 8;
pub const MAX_SYMBOLS_PER_FRAME: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub first_pass_logp: f64,
    pub delib_logp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub utt_id: String,
    pub hyps: Vec<Hypothesis>,
}

fn emittable(k: usize) -> bool {
    k >= NUM_RESERVED
}

/// Caches prediction-network states by label history for one utterance.
struct PredCache<'a> {
    model: &'a FirstPass,
    store: &'a ParamStore,
    states: HashMap<Vec<usize>, PredState>,
}

impl<'a> PredCache<'a> {
    fn new(model: &'a FirstPass, store: &'a ParamStore) -> Result<Self> {
        let mut states = HashMap::new();
        states.insert(Vec::new(), model.pred.start(store)?);
        Ok(Self {
            model,
            store,
            states,
        })
    }

    fn get(&mut self, seq: &[usize]) -> Result<&PredState> {
        if !self.states.contains_key(seq) {
            let parent = self.get(&seq[..seq.len() - 1])?.clone();
            let next = self.model.pred.feed(self.store, &parent, seq[seq.len() - 1])?;
            self.states.insert(seq.to_vec(), next);
        }
        Ok(&self.states[seq])
    }

    fn logprobs(&mut self, enc_row: &[f64], seq: &[usize]) -> Result<Vec<f64>> {
        let out = self.get(seq)?.out.clone();
        self.model.joint.step_logprobs(self.store, enc_row, &out)
    }
}

fn check_enc(enc: &Tensor) -> Result<()> {
    if enc.rank() != 2 || enc.rows() == 0 {
        return Err(Error::invalid("empty encoder sequence"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Cand {
    seq: Vec<usize>,
    score: f64,
    finished: bool,
}

/// Score descending; equal scores fall back to generation order.
fn rank_candidates(c: &mut [Cand]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score));
}

fn sort_hyps(hyps: &mut [(Vec<usize>, f64)]) {
    hyps.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

pub fn beam_search(
    model: &FirstPass,
    store: &ParamStore,
    enc: &Tensor,
    beam: usize,
    max_symbols: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    check_enc(enc)?;
    let proj = model.joint.project_encoder(store, enc)?;
    let mut cache = PredCache::new(model, store)?;
    let mut current: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];

    for t in 0..proj.rows() {
        let row = proj.row(t);
        let mut finished: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut active = current;
        for round in 0..=max_symbols {
            if active.is_empty() {
                break;
            }
            let mut cands = Vec::new();
            for (seq, score) in &active {
                let lp = cache.logprobs(row, seq)?;
                cands.push(Cand {
                    seq: seq.clone(),
                    score: score + lp[BLANK],
                    finished: true,
                });
                if round < max_symbols {
                    let mut labels: Vec<usize> = (0..lp.len()).filter(|&k| emittable(k)).collect();
                    labels.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                    for &k in labels.iter().take(beam) {
                        let mut s = seq.clone();
                        s.push(k);
                        cands.push(Cand {
                            seq: s,
                            score: score + lp[k],
                            finished: false,
                        });
                    }
                }
            }
            rank_candidates(&mut cands);
            cands.truncate(beam);
            active = Vec::new();
            for c in cands {
                if c.finished {
                    let e = finished.entry(c.seq).or_insert(f64::NEG_INFINITY);
                    *e = e.max(c.score);
                } else {
                    active.push((c.seq, c.score));
                }
            }
            // scores only fall, so actives below the beam-th finished score are dead
            if finished.len() >= beam {
                let mut f: Vec<f64> = finished.values().copied().collect();
                f.sort_by(|a, b| b.total_cmp(a));
                let floor = f[beam - 1];
                active.retain(|(_, s)| *s > floor);
            }
        }
        let mut next: Vec<(Vec<usize>, f64)> = finished.into_iter().collect();
        sort_hyps(&mut next);
        next.truncate(beam);
        assert!(!next.is_empty(), "blank extension keeps at least one hypothesis");
        current = next;
    }
    Ok(current
        .into_iter()
        .map(|(tokens, s)| Hypothesis {
            tokens,
            first_pass_logp: s,
            delib_logp: None,
        })
        .collect())
}

/// Frame-by-frame argmax decoding with the same per-frame symbol cap.
pub fn greedy_decode(
    model: &FirstPass,
    store: &ParamStore,
    enc: &Tensor,
    max_symbols: usize,
) -> Result<Hypothesis> {
    check_enc(enc)?;
    let proj = model.joint.project_encoder(store, enc)?;
    let mut cache = PredCache::new(model, store)?;
    let mut seq = Vec::new();
    let mut score = 0.0;
    for t in 0..proj.rows() {
        let row = proj.row(t);
        for round in 0..=max_symbols {
            let lp = cache.logprobs(row, &seq)?;
            let mut best = (BLANK, score + lp[BLANK]);
            if round < max_symbols {
                // same visiting order as the beam's candidate list
                let mut labels: Vec<usize> = (0..lp.len()).filter(|&k| emittable(k)).collect();
                labels.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for k in labels {
                    if score + lp[k] > best.1 {
                        best = (k, score + lp[k]);
                    }
                }
            }
            score = best.1;
            if best.0 == BLANK {
                break;
            }
            seq.push(best.0);
        }
    }
    Ok(Hypothesis {
        tokens: seq,
        first_pass_logp: score,
        delib_logp: None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSample {
    /// One token per encoder frame, blank included.
    pub aligned: Vec<usize>,
    /// `aligned` with blanks removed.
    pub tokens: Vec<usize>,
}

/// One categorical draw per encoder frame from the joint distribution at
/// `(t, u)`, where `u` counts the labels drawn so far.
pub fn frame_sample(
    model: &FirstPass,
    store: &ParamStore,
    enc: &Tensor,
    rng: &mut SeededRng,
    temperature: f64,
) -> Result<FrameSample> {
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    check_enc(enc)?;
    let proj = model.joint.project_encoder(store, enc)?;
    let mut cache = PredCache::new(model, store)?;
    let mut aligned = Vec::with_capacity(proj.rows());
    let mut tokens = Vec::new();
    for t in 0..proj.rows() {
        let lp = cache.logprobs(proj.row(t), &tokens)?;
        let allowed = |k: usize| k == BLANK || emittable(k);
        let m = (0..lp.len())
            .filter(|&k| allowed(k))
            .map(|k| lp[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (0..lp.len())
            .map(|k| {
                if allowed(k) {
                    ((lp[k] - m) / temperature).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let k = rng.categorical(&weights);
        aligned.push(k);
        if k != BLANK {
            tokens.push(k);
        }
    }
    Ok(FrameSample { aligned, tokens })
}

fn fmt_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// One line per hypothesis: `utt_id<TAB>rank<TAB>first_pass_logp<TAB>ids`,
/// plus a fifth `delib_logp` column when the hypothesis has been rescored.
pub fn write_nbest(path: &Path, lists: &[NBestList]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lists {
        for (rank, h) in l.hyps.iter().enumerate() {
            write!(w, "{}\t{}\t{}\t{}", l.utt_id, rank, h.first_pass_logp, fmt_ids(&h.tokens))?;
            if let Some(d) = h.delib_logp {
                write!(w, "\t{d}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestList>> {
    let r = BufReader::new(File::open(path)?);
    let mut out: Vec<NBestList> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::format("n-best file", format!("line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 && f.len() != 5 {
            return Err(bad());
        }
        let rank: usize = f[1].parse().map_err(|_| bad())?;
        let logp: f64 = f[2].parse().map_err(|_| bad())?;
        let tokens = f[3]
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let delib_logp = match f.get(4) {
            Some(d) => Some(d.parse::<f64>().map_err(|_| bad())?),
            None => None,
        };
        let hyp = Hypothesis {
            tokens,
            first_pass_logp: logp,
            delib_logp,
        };
        match out.last_mut() {
            Some(l) if l.utt_id == f[0] => {
                if rank != l.hyps.len() {
                    return Err(bad());
                }
                l.hyps.push(hyp);
            }
            _ => {
                if rank != 0 || out.iter().any(|l| l.utt_id == f[0]) {
                    return Err(bad());
                }
                out.push(NBestList {
                    utt_id: f[0].to_string(),
                    hyps: vec![hyp],
                });
            }
        }
    }
    Ok(out)
}
