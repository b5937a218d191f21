//! Run configuration: TOML documents with `section.key` entries, checked
//! against a fixed schema, layered over named presets.

use std::path::Path;

use toml::{Table, Value};

use crate::deliberation::{DecoderConfig, DeliberationConfig, TextEncoderConfig, TextEncoderKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::SpecAugConfig;
use crate::optim::{OptimizerKind, Schedule, ScheduleKind};
use crate::params::Precision;
use crate::transducer::{EncoderSource, FirstPass, TransducerConfig, DEFAULT_CAUSAL_PROB};

/// Presets compiled into the binary: name and TOML text.
pub const PRESETS: &[(&str, &str)] = &[
    ("B0", include_str!("../presets/B0.toml")),
    ("B1", include_str!("../presets/B1.toml")),
    ("B2", include_str!("../presets/B2.toml")),
    ("E0", include_str!("../presets/E0.toml")),
    ("E1", include_str!("../presets/E1.toml")),
    ("E2", include_str!("../presets/E2.toml")),
    ("E3", include_str!("../presets/E3.toml")),
    ("E4", include_str!("../presets/E4.toml")),
    ("E5", include_str!("../presets/E5.toml")),
    ("E6", include_str!("../presets/E6.toml")),
    ("E7", include_str!("../presets/E7.toml")),
    ("E8", include_str!("../presets/E8.toml")),
    ("E9", include_str!("../presets/E9.toml")),
    ("tiny", include_str!("../presets/tiny.toml")),
    ("tiny-conformer", include_str!("../presets/tiny-conformer.toml")),
];

const MAX_PRESET_DEPTH: usize = 8;

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub count_threshold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DelibSettings {
    pub enabled: bool,
    pub text_encoder: TextEncoderConfig,
    pub decoder: DecoderConfig,
    /// Weight on the first-pass score when rescoring.
    pub lambda: f64,
    pub label_smoothing: f64,
    /// Encoder whose output and hypotheses feed the rescorer.
    pub source: EncoderSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub grad_cap: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub p_causal: f64,
    pub precision: Precision,
    pub specaug: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            schedule: Schedule {
                kind: ScheduleKind::Transformer,
                warmup_steps: 32_000,
                peak_lr: 1.8e-3,
            },
            grad_cap: 5.0,
            ema_decay: 0.9999,
            batch_size: 4096,
            steps: 500_000,
            seed: 0,
            checkpoint_every: 10_000,
            p_causal: DEFAULT_CAUSAL_PROB,
            precision: Precision::F32,
            specaug: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: String| Err(Error::Config(format!("{section}.{m}")));
        if !(self.grad_cap > 0.0) {
            return bad("grad_cap must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.p_causal) {
            return bad("p_causal must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub tokenizer: TokenizerConfig,
    pub specaug: SpecAugConfig,
    pub encoder: EncoderConfig,
    pub transducer: TransducerConfig,
    pub delib: DelibSettings,
    pub train: TrainConfig,
    pub delib_train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            tokenizer: TokenizerConfig {
                vocab_size: 16_384,
                count_threshold: crate::tokenizer::DEFAULT_COUNT_THRESHOLD,
            },
            specaug: SpecAugConfig::default(),
            encoder: EncoderConfig::default(),
            transducer: TransducerConfig::default(),
            delib: DelibSettings {
                enabled: false,
                text_encoder: TextEncoderConfig::default(),
                decoder: DecoderConfig::default(),
                lambda: 0.0,
                label_smoothing: 0.1,
                source: EncoderSource::Noncausal,
            },
            train: TrainConfig::default(),
            delib_train: TrainConfig::default(),
        }
    }
}

/// Parameter totals of a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub first_pass: usize,
    pub text_encoder: usize,
    /// Whole rescorer, text encoder included.
    pub deliberation: usize,
    pub total: usize,
}

fn flatten(prefix: &str, t: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten(&key, inner, out),
            _ => out.push((key, v.clone())),
        }
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| Error::Config(format!("{key} must be a number")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Config(format!("{key} must be a string")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("{key} must be true or false")))
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(Error::Config(format!("unknown precision {s:?}"))),
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn set_train(t: &mut TrainConfig, key: &str, full: &str, v: &Value) -> Result<()> {
    match key {
        "optimizer" => t.optimizer = as_str(full, v)?.parse()?,
        "lr_schedule" => t.schedule.kind = as_str(full, v)?.parse()?,
        "warmup_steps" => t.schedule.warmup_steps = as_usize(full, v)? as u64,
        "peak_lr" => t.schedule.peak_lr = as_f64(full, v)?,
        "grad_cap" => t.grad_cap = as_f64(full, v)?,
        "ema_decay" => t.ema_decay = as_f64(full, v)?,
        "batch_size" => t.batch_size = as_usize(full, v)?,
        "steps" => t.steps = as_usize(full, v)? as u64,
        "seed" => t.seed = as_usize(full, v)? as u64,
        "checkpoint_every" => t.checkpoint_every = as_usize(full, v)? as u64,
        "p_causal" => t.p_causal = as_f64(full, v)?,
        "precision" => t.precision = parse_precision(as_str(full, v)?)?,
        "specaug" => t.specaug = as_bool(full, v)?,
        _ => return Err(Error::Config(format!("unknown config key {full:?}"))),
    }
    Ok(())
}

impl RunConfig {
    /// Set one dotted key; unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let e = &mut self.encoder;
        let tr = &mut self.transducer;
        let d = &mut self.delib;
        match key {
            "preset" => self.preset = Some(as_str(key, v)?.to_string()),
            "tokenizer.vocab_size" => self.tokenizer.vocab_size = as_usize(key, v)?,
            "tokenizer.count_threshold" => self.tokenizer.count_threshold = as_usize(key, v)?,
            "frontend.specaug.freq_masks" => self.specaug.freq_masks = as_usize(key, v)?,
            "frontend.specaug.max_freq" => self.specaug.max_freq = as_usize(key, v)?,
            "frontend.specaug.time_masks" => self.specaug.time_masks = as_usize(key, v)?,
            "frontend.specaug.max_time" => self.specaug.max_time = as_usize(key, v)?,
            "encoder.dim" => e.dim = as_usize(key, v)?,
            "encoder.causal_layers" => e.causal_layers = as_usize(key, v)?,
            "encoder.first_block_layers" => e.first_block_layers = as_usize(key, v)?,
            "encoder.wide_layer_dim" => e.wide_layer_dim = as_usize(key, v)?,
            "encoder.noncausal_layers" => e.noncausal_layers = as_usize(key, v)?,
            "encoder.noncausal_dim" => e.noncausal_dim = as_usize(key, v)?,
            "encoder.right_context_frames" => e.right_context_frames = as_usize(key, v)?,
            "encoder.heads" => e.heads = as_usize(key, v)?,
            "encoder.conv_kernel" => e.conv_kernel = as_usize(key, v)?,
            "encoder.noncausal_conv_kernel" => e.noncausal_conv_kernel = as_usize(key, v)?,
            "encoder.ff_mult" => e.ff_mult = as_usize(key, v)?,
            "encoder.rel_clip" => e.rel_clip = as_usize(key, v)?,
            "transducer.pred_layers" => tr.pred_layers = as_usize(key, v)?,
            "transducer.pred_dim" => tr.pred_dim = as_usize(key, v)?,
            "transducer.pred_proj" => tr.pred_proj = as_usize(key, v)?,
            "transducer.joint_dim" => tr.joint_dim = as_usize(key, v)?,
            "delib.enabled" => d.enabled = as_bool(key, v)?,
            "delib.text_encoder.kind" => d.text_encoder.kind = as_str(key, v)?.parse::<TextEncoderKind>()?,
            "delib.text_encoder.layers" => d.text_encoder.layers = as_usize(key, v)?,
            "delib.text_encoder.dim" => d.text_encoder.dim = as_usize(key, v)?,
            "delib.text_encoder.cell" => d.text_encoder.cell = as_usize(key, v)?,
            "delib.text_encoder.lookahead" => d.text_encoder.lookahead = as_usize(key, v)?,
            "delib.text_encoder.heads" => d.text_encoder.heads = as_usize(key, v)?,
            "delib.text_encoder.conv_kernel" => d.text_encoder.conv_kernel = as_usize(key, v)?,
            "delib.decoder.layers" => d.decoder.layers = as_usize(key, v)?,
            "delib.decoder.hidden" => d.decoder.hidden = as_usize(key, v)?,
            "delib.decoder.proj" => d.decoder.proj = as_usize(key, v)?,
            "delib.decoder.heads" => d.decoder.heads = as_usize(key, v)?,
            "delib.lambda" => d.lambda = as_f64(key, v)?,
            "delib.label_smoothing" => d.label_smoothing = as_f64(key, v)?,
            "delib.source" => {
                d.source = as_str(key, v)?
                    .parse()
                    .map_err(|e: Error| Error::Config(e.to_string()))?
            }
            _ => {
                if let Some(k) = key.strip_prefix("train.") {
                    set_train(&mut self.train, k, key, v)?
                } else if let Some(k) = key.strip_prefix("delib_train.") {
                    set_train(&mut self.delib_train, k, key, v)?
                } else {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Apply a parsed document. A `preset` key pulls in that preset first,
    /// so explicit keys win.
    fn apply(&mut self, doc: &Table, depth: usize) -> Result<()> {
        if depth > MAX_PRESET_DEPTH {
            return Err(Error::Config("preset chain too deep".into()));
        }
        if let Some(p) = doc.get("preset") {
            let name = as_str("preset", p)?;
            let base = parse_toml(preset_text(name)?)?;
            self.apply(&base, depth + 1)?;
            self.preset = Some(name.to_string());
        }
        let mut flat = Vec::new();
        flatten("", doc, &mut flat);
        for (k, v) in flat.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_layers(text, &[])
    }

    /// Config text plus `key=value` overrides, validated.
    pub fn from_layers(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_toml(text)?, 0)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            let value = parse_value(v.trim())?;
            if k == "preset" {
                return Err(Error::Config("preset cannot be overridden".into()));
            }
            cfg.set(k, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_layers(&text, overrides)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml(&format!("preset = {name:?}\n"))
    }

    /// Load `spec` as a file if it exists, otherwise as a preset name.
    pub fn resolve(spec: &str, overrides: &[String]) -> Result<Self> {
        let p = Path::new(spec);
        if p.is_file() {
            Self::from_file(p, overrides)
        } else {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
            preset_text(name)?;
            Self::from_layers(&format!("preset = {name:?}\n"), overrides)
        }
    }

    pub fn transducer_for(&self, vocab: usize) -> TransducerConfig {
        TransducerConfig {
            vocab,
            ..self.transducer.clone()
        }
    }

    pub fn delib_config(&self, vocab: usize) -> DeliberationConfig {
        let audio_dim = self.encoder.dim;
        DeliberationConfig {
            vocab,
            audio_dim,
            text_encoder: self.delib.text_encoder.clone(),
            decoder: self.delib.decoder.clone(),
            lambda: self.delib.lambda,
            label_smoothing: self.delib.label_smoothing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transducer_for(self.tokenizer.vocab_size).validate()?;
        if self.tokenizer.vocab_size <= crate::tokenizer::NUM_RESERVED {
            return Err(Error::Config("tokenizer.vocab_size must exceed the reserved symbols".into()));
        }
        if self.specaug.max_freq >= crate::frontend::RAW_DIM {
            return Err(Error::Config("frontend.specaug.max_freq must be below the feature width".into()));
        }
        self.train.validate("train")?;
        self.delib_train.validate("delib_train")?;
        if self.delib.enabled {
            self.delib_config(self.tokenizer.vocab_size).validate()?;
            if self.delib.source == EncoderSource::Noncausal && self.encoder.noncausal_layers == 0 {
                return Err(Error::Config(
                    "delib.source = \"noncausal\" needs a cascaded encoder".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn count_params(&self) -> ParamCounts {
        let v = self.tokenizer.vocab_size;
        let first_pass = FirstPass::count(&self.encoder, &self.transducer_for(v));
        let (text_encoder, deliberation) = if self.delib.enabled {
            let d = self.delib_config(v);
            (d.count_text_encoder(), d.count())
        } else {
            (0, 0)
        };
        ParamCounts {
            first_pass,
            text_encoder,
            deliberation,
            total: first_pass + deliberation,
        }
    }

    /// Effective configuration as TOML; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        let q = |x: &str| format!("{x:?}");
        let f = |x: f64| format!("{x:?}");
        if let Some(p) = &self.preset {
            line("# preset", q(p));
        }
        line("tokenizer.vocab_size", self.tokenizer.vocab_size.to_string());
        line("tokenizer.count_threshold", self.tokenizer.count_threshold.to_string());
        let sa = &self.specaug;
        line("frontend.specaug.freq_masks", sa.freq_masks.to_string());
        line("frontend.specaug.max_freq", sa.max_freq.to_string());
        line("frontend.specaug.time_masks", sa.time_masks.to_string());
        line("frontend.specaug.max_time", sa.max_time.to_string());
        let e = &self.encoder;
        for (k, v) in [
            ("dim", e.dim),
            ("causal_layers", e.causal_layers),
            ("first_block_layers", e.first_block_layers),
            ("wide_layer_dim", e.wide_layer_dim),
            ("noncausal_layers", e.noncausal_layers),
            ("noncausal_dim", e.noncausal_dim),
            ("right_context_frames", e.right_context_frames),
            ("heads", e.heads),
            ("conv_kernel", e.conv_kernel),
            ("noncausal_conv_kernel", e.noncausal_conv_kernel),
            ("ff_mult", e.ff_mult),
            ("rel_clip", e.rel_clip),
        ] {
            line(&format!("encoder.{k}"), v.to_string());
        }
        let t = &self.transducer;
        for (k, v) in [
            ("pred_layers", t.pred_layers),
            ("pred_dim", t.pred_dim),
            ("pred_proj", t.pred_proj),
            ("joint_dim", t.joint_dim),
        ] {
            line(&format!("transducer.{k}"), v.to_string());
        }
        let d = &self.delib;
        line("delib.enabled", d.enabled.to_string());
        line("delib.text_encoder.kind", q(&d.text_encoder.kind.to_string()));
        let te = &d.text_encoder;
        for (k, v) in [
            ("layers", te.layers),
            ("dim", te.dim),
            ("cell", te.cell),
            ("lookahead", te.lookahead),
            ("heads", te.heads),
            ("conv_kernel", te.conv_kernel),
        ] {
            line(&format!("delib.text_encoder.{k}"), v.to_string());
        }
        let dc = &d.decoder;
        for (k, v) in [
            ("layers", dc.layers),
            ("hidden", dc.hidden),
            ("proj", dc.proj),
            ("heads", dc.heads),
        ] {
            line(&format!("delib.decoder.{k}"), v.to_string());
        }
        line("delib.lambda", f(d.lambda));
        line("delib.label_smoothing", f(d.label_smoothing));
        line("delib.source", q(&d.source.to_string()));
        for (sec, tc) in [("train", &self.train), ("delib_train", &self.delib_train)] {
            line(&format!("{sec}.optimizer"), q(&tc.optimizer.to_string()));
            line(&format!("{sec}.lr_schedule"), q(&tc.schedule.kind.to_string()));
            line(&format!("{sec}.warmup_steps"), tc.schedule.warmup_steps.to_string());
            line(&format!("{sec}.peak_lr"), f(tc.schedule.peak_lr));
            line(&format!("{sec}.grad_cap"), f(tc.grad_cap));
            line(&format!("{sec}.ema_decay"), f(tc.ema_decay));
            line(&format!("{sec}.batch_size"), tc.batch_size.to_string());
            line(&format!("{sec}.steps"), tc.steps.to_string());
            line(&format!("{sec}.seed"), tc.seed.to_string());
            line(&format!("{sec}.checkpoint_every"), tc.checkpoint_every.to_string());
            line(&format!("{sec}.p_causal"), f(tc.p_causal));
            line(&format!("{sec}.precision"), q(precision_name(tc.precision)));
            line(&format!("{sec}.specaug"), tc.specaug.to_string());
        }
        s
    }
}

fn parse_toml(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::Config(format!("bad config syntax: {e}")))
}

/// A bare override value: TOML literal, falling back to a plain string.
fn parse_value(v: &str) -> Result<Value> {
    match format!("x = {v}").parse::<Table>() {
        Ok(mut t) => Ok(t.remove("x").expect("key just parsed")),
        Err(_) if !v.is_empty() => Ok(Value::String(v.to_string())),
        Err(e) => Err(Error::Config(format!("bad override value {v:?}: {e}"))),
    }
}
