//! Training loops for the first pass and the rescorer, plus the corpus
//! loading they share.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{RunConfig, TokenizerConfig, TrainConfig};
use crate::deliberation::Deliberation;
use crate::error::{Error, Result};
use crate::frontend::{read_feature_set, spec_augment, stack_frames, FeatureMatrix, SpecAugConfig, STACK_FACTOR};
use crate::graph::{GradMap, Graph};
use crate::optim::{clip_per_param, ema_update, lr_at, sample_batch, Optimizer};
use crate::params::{NamedTensors, ParamStore};
use crate::rng::SeededRng;
use crate::search::frame_sample;
use crate::synth::{read_languages, read_transcripts, Script, Split};
use crate::tensor::Tensor;
use crate::tokenizer::{train_wordpieces, TrainText, WordpieceVocab};
use crate::transducer::{select_encoder_source, EncoderSource, FirstPass, Mode};

pub const PARAM_PREFIX: &str = "param.";
pub const EMA_PREFIX: &str = "ema.";
pub const OPT_PREFIX: &str = "opt.";
/// Frozen first-pass tensors stored inside rescorer checkpoints.
pub const FIRST_PASS_PREFIX: &str = "fp.";

/// Stream id reserved for parameter initialization.
const INIT_STREAM: u64 = u64::MAX;

/// One transcribed utterance.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub language: String,
    pub logographic: bool,
    pub features: FeatureMatrix,
    pub text: String,
    /// Wordpiece ids; empty until a vocabulary is applied.
    pub labels: Vec<usize>,
}

/// Logographic flag per language name.
pub fn language_scripts(data_dir: &Path) -> Result<HashMap<String, bool>> {
    Ok(read_languages(data_dir)?
        .into_iter()
        .map(|(n, s)| (n, s == Script::Logographic))
        .collect())
}

/// Features of `split` joined with their transcripts, in manifest order.
pub fn load_examples(data_dir: &Path, split: Split, vocab: Option<&WordpieceVocab>) -> Result<Vec<Example>> {
    let scripts = language_scripts(data_dir)?;
    let texts: HashMap<String, String> = read_transcripts(data_dir)?
        .into_iter()
        .filter(|t| t.split == split)
        .map(|t| (t.id, t.text))
        .collect();
    let feats = read_feature_set(&data_dir.join(split.name()))?;
    feats
        .into_iter()
        .map(|f| {
            let text = texts
                .get(&f.utterance_id)
                .ok_or_else(|| Error::invalid(format!("no transcript for {}", f.utterance_id)))?
                .clone();
            let logographic = *scripts
                .get(&f.language_id)
                .ok_or_else(|| Error::invalid(format!("unknown language {}", f.language_id)))?;
            let labels = vocab.map(|v| v.segment(&text, logographic).ids).unwrap_or_default();
            Ok(Example {
                id: f.utterance_id.clone(),
                language: f.language_id.clone(),
                logographic,
                features: f,
                text,
                labels,
            })
        })
        .collect()
}

/// Learn the wordpiece inventory from the training transcripts.
pub fn build_vocab(data_dir: &Path, cfg: &TokenizerConfig) -> Result<WordpieceVocab> {
    let scripts = language_scripts(data_dir)?;
    let entries: Vec<_> = read_transcripts(data_dir)?
        .into_iter()
        .filter(|t| t.split == Split::Train)
        .collect();
    let corpus: Vec<TrainText<'_>> = entries
        .iter()
        .map(|t| TrainText {
            text: &t.text,
            logographic: scripts.get(&t.language).copied().unwrap_or(false),
        })
        .collect();
    train_wordpieces(&corpus, cfg.vocab_size, cfg.count_threshold)
}

/// Loss and learning rate of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    /// Summed loss over the batch divided by its label count.
    pub loss: f64,
    pub lr: f64,
}

/// Sum per-item gradients in batch order, normalize, cap, update, average.
fn apply_batch(
    store: &mut ParamStore,
    ema: &mut ParamStore,
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    parts: Vec<(f64, usize, GradMap)>,
) -> Result<StepLog> {
    let step = opt.step + 1;
    let count: usize = parts.iter().map(|p| p.1).sum::<usize>().max(1);
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {step}")));
    }
    let maps: Vec<GradMap> = parts.into_iter().map(|p| p.2).collect();
    let mut total = GradMap::sum_ordered(store, &maps);
    total.scale(1.0 / count as f64);
    for (_, g) in total.iter_mut() {
        clip_per_param(g, cfg.grad_cap)?;
    }
    let lr = lr_at(step, &cfg.schedule);
    opt.apply(store, &total, lr, cfg.precision)?;
    ema_update(ema, store, cfg.ema_decay, cfg.precision)?;
    Ok(StepLog { step, loss, lr })
}

fn item_rngs(rng: &mut SeededRng, n: usize) -> Vec<SeededRng> {
    (0..n).map(|_| SeededRng::new(rng.next_u64())).collect()
}

pub struct FirstPassTrainer {
    pub model: FirstPass,
    pub store: ParamStore,
    pub ema: ParamStore,
    pub opt: Optimizer,
    pub cfg: TrainConfig,
    pub specaug: SpecAugConfig,
}

impl FirstPassTrainer {
    pub fn new(run: &RunConfig, vocab: usize) -> Result<Self> {
        let cfg = run.train.clone();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::stream(cfg.seed, INIT_STREAM);
        let model = FirstPass::new(&mut store, &run.encoder, &run.transducer_for(vocab), &mut rng)?;
        store.round_to(cfg.precision);
        let ema = store.clone();
        let opt = Optimizer::new(cfg.optimizer, &store);
        Ok(Self {
            model,
            store,
            ema,
            opt,
            cfg,
            specaug: run.specaug.clone(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    /// Per-utterance loss and gradients, without updating anything.
    pub fn item_loss(&self, ex: &Example, rng: &mut SeededRng) -> Result<(f64, usize, GradMap)> {
        let feats = if self.cfg.specaug {
            spec_augment(&ex.features, rng, &self.specaug)?.0
        } else {
            ex.features.clone()
        };
        let stacked = stack_frames(&feats, STACK_FACTOR)?;
        let source = if self.model.encoder.cfg.noncausal_layers == 0 {
            EncoderSource::Causal
        } else {
            select_encoder_source(Mode::Train, self.cfg.p_causal, rng)?
        };
        let mut g = Graph::new();
        let loss = self.model.loss(&mut g, &self.store, &stacked.frames, &ex.labels, source)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.into_map(&self.store);
        Ok((value, ex.labels.len().max(1), grads))
    }

    pub fn step(&mut self, data: &[Example]) -> Result<StepLog> {
        let step = self.opt.step + 1;
        let mut rng = SeededRng::stream(self.cfg.seed, step);
        let batch = sample_batch(data.len(), &mut rng, self.cfg.batch_size)?;
        let rngs = item_rngs(&mut rng, batch.len());
        let this = &*self;
        let parts: Vec<_> = batch
            .par_iter()
            .zip(rngs)
            .map(|(&i, mut r)| this.item_loss(&data[i], &mut r))
            .collect::<Result<_>>()?;
        apply_batch(&mut self.store, &mut self.ema, &mut self.opt, &self.cfg, parts)
    }

    pub fn checkpoint(&self) -> NamedTensors {
        let mut t = self.store.to_named(PARAM_PREFIX);
        t.extend(self.ema.to_named(EMA_PREFIX));
        t.extend(self.opt.to_named(&self.store, OPT_PREFIX));
        t
    }

    pub fn restore(&mut self, t: &NamedTensors) -> Result<()> {
        self.store.load_named(t, PARAM_PREFIX)?;
        self.ema.load_named(t, EMA_PREFIX)?;
        self.opt.load_named(&self.store, t, OPT_PREFIX)
    }
}

/// First-pass model with its EMA weights, as used for decoding.
pub struct FrozenFirstPass {
    pub model: FirstPass,
    pub store: ParamStore,
}

impl FrozenFirstPass {
    /// Build from a first-pass checkpoint, reading tensors under `prefix`.
    pub fn from_tensors(run: &RunConfig, vocab: usize, t: &NamedTensors, prefix: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        let model = FirstPass::new(&mut store, &run.encoder, &run.transducer_for(vocab), &mut rng)?;
        store.load_named(t, prefix)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.set_frozen(id, true);
        }
        Ok(Self { model, store })
    }

    pub fn encode(&self, feats: &FeatureMatrix, source: EncoderSource) -> Result<Tensor> {
        let stacked = stack_frames(feats, STACK_FACTOR)?;
        let out = self.model.encoder.encode(&self.store, &stacked.frames)?;
        Ok(out.select(source).clone())
    }

    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        self.store.to_named(prefix)
    }
}

pub struct DelibTrainer {
    pub first_pass: FrozenFirstPass,
    pub model: Deliberation,
    pub store: ParamStore,
    pub ema: ParamStore,
    pub opt: Optimizer,
    pub cfg: TrainConfig,
    pub source: EncoderSource,
    pub label_smoothing: f64,
    pub specaug: SpecAugConfig,
    /// Unmasked encodings; empty when each step re-encodes masked features.
    audio: Vec<Tensor>,
    encoded_len: usize,
}

impl DelibTrainer {
    /// Without SpecAugment `data` is encoded once up front, since the first
    /// pass never changes. With it, every item is masked and re-encoded.
    pub fn new(run: &RunConfig, vocab: usize, first_pass: FrozenFirstPass, data: &[Example]) -> Result<Self> {
        if !run.delib.enabled {
            return Err(Error::Config("delib.enabled is false".into()));
        }
        let cfg = run.delib_train.clone();
        let dcfg = run.delib_config(vocab);
        let mut store = ParamStore::new();
        let mut rng = SeededRng::stream(cfg.seed, INIT_STREAM);
        let model = Deliberation::new(&mut store, "delib", &dcfg, &mut rng)?;
        store.round_to(cfg.precision);
        let ema = store.clone();
        let opt = Optimizer::new(cfg.optimizer, &store);
        let source = run.delib.source;
        let fp = &first_pass;
        let audio = if cfg.specaug {
            Vec::new()
        } else {
            data.par_iter()
                .map(|ex| fp.encode(&ex.features, source))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            first_pass,
            model,
            store,
            ema,
            opt,
            cfg,
            source,
            label_smoothing: dcfg.label_smoothing,
            specaug: run.specaug.clone(),
            audio,
            encoded_len: data.len(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn item_loss(&self, i: usize, ex: &Example, rng: &mut SeededRng) -> Result<(f64, usize, GradMap)> {
        let masked;
        let audio = if self.cfg.specaug {
            let feats = spec_augment(&ex.features, rng, &self.specaug)?.0;
            masked = self.first_pass.encode(&feats, self.source)?;
            &masked
        } else {
            &self.audio[i]
        };
        let sampled = frame_sample(&self.first_pass.model, &self.first_pass.store, audio, rng, 1.0)?;
        let mut g = Graph::new();
        let (loss, n) = self
            .model
            .loss(&mut g, &self.store, audio, &sampled.tokens, &ex.labels, self.label_smoothing)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.into_map(&self.store);
        Ok((value, n, grads))
    }

    pub fn step(&mut self, data: &[Example]) -> Result<StepLog> {
        if data.len() != self.encoded_len {
            return Err(Error::invalid("training data differs from the encoded set"));
        }
        let step = self.opt.step + 1;
        let mut rng = SeededRng::stream(self.cfg.seed, step);
        let batch = sample_batch(data.len(), &mut rng, self.cfg.batch_size)?;
        let rngs = item_rngs(&mut rng, batch.len());
        let this = &*self;
        let parts: Vec<_> = batch
            .par_iter()
            .zip(rngs)
            .map(|(&i, mut r)| this.item_loss(i, &data[i], &mut r))
            .collect::<Result<_>>()?;
        apply_batch(&mut self.store, &mut self.ema, &mut self.opt, &self.cfg, parts)
    }

    pub fn checkpoint(&self) -> NamedTensors {
        let mut t = self.store.to_named(PARAM_PREFIX);
        t.extend(self.ema.to_named(EMA_PREFIX));
        t.extend(self.opt.to_named(&self.store, OPT_PREFIX));
        t.extend(self.first_pass.to_named(FIRST_PASS_PREFIX));
        t
    }

    pub fn restore(&mut self, t: &NamedTensors) -> Result<()> {
        self.store.load_named(t, PARAM_PREFIX)?;
        self.ema.load_named(t, EMA_PREFIX)?;
        self.opt.load_named(&self.store, t, OPT_PREFIX)
    }
}
