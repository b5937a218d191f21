//! Deliberation rescorer: a text encoder over the sampled first-pass
//! hypothesis and a transformer decoder attending to both the audio
//! encodings and the encoded hypothesis.
//!
//! One token embedding table feeds both the text encoder and the decoder
//! input; the output softmax has its own weights.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    sinusoidal_positions, AttnMask, ConformerGeometry, ConformerLayer, DecoderGeometry,
    DecoderLayer, LayerNorm, Linear, Lstmp,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::search::Hypothesis;
use crate::tensor::Tensor;
use crate::tokenizer::{BLANK, EOS, SOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextEncoderKind {
    Bilstm,
    Conformer,
}

impl std::str::FromStr for TextEncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Self::Bilstm),
            "conformer" => Ok(Self::Conformer),
            _ => Err(Error::Config(format!("unknown text encoder kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for TextEncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bilstm => "bilstm",
            Self::Conformer => "conformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub kind: TextEncoderKind,
    pub layers: usize,
    /// Output width; for the BiLSTM each direction projects to `dim / 2`.
    pub dim: usize,
    /// BiLSTM cell size.
    pub cell: usize,
    /// Conformer only: total token lookahead.
    pub lookahead: usize,
    pub heads: usize,
    pub conv_kernel: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            kind: TextEncoderKind::Bilstm,
            layers: 2,
            dim: 512,
            cell: 2048,
            lookahead: 4,
            heads: 8,
            conv_kernel: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub proj: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 2048,
            proj: 512,
            heads: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeliberationConfig {
    pub vocab: usize,
    /// Width of the audio encodings attended to.
    pub audio_dim: usize,
    pub text_encoder: TextEncoderConfig,
    pub decoder: DecoderConfig,
    pub lambda: f64,
    pub label_smoothing: f64,
}

const TEXT_REL_CLIP: usize = 16;

impl DeliberationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.decoder;
        if d.proj == 0 || d.heads == 0 || d.proj % d.heads != 0 {
            return bad(format!("delib.decoder.proj {} not divisible by {} heads", d.proj, d.heads));
        }
        if d.hidden == 0 {
            return bad("delib.decoder.hidden must be positive".into());
        }
        let t = &self.text_encoder;
        if t.layers == 0 || t.dim == 0 {
            return bad("text encoder needs at least one layer".into());
        }
        match t.kind {
            TextEncoderKind::Bilstm if t.dim % 2 != 0 => {
                return bad(format!("bilstm text encoder dim {} must be even", t.dim))
            }
            TextEncoderKind::Conformer => {
                if t.lookahead != 4 {
                    return bad(format!("conformer text encoder lookahead must be 4, got {}", t.lookahead));
                }
                if t.heads == 0 || t.dim % t.heads != 0 || t.conv_kernel % 2 == 0 {
                    return bad("conformer text encoder geometry invalid".into());
                }
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("delib.lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    fn text_geo(&self) -> ConformerGeometry {
        ConformerGeometry {
            dim: self.text_encoder.dim,
            heads: self.text_encoder.heads,
            kernel: self.text_encoder.conv_kernel,
            ff_mult: 4,
            rel_clip: TEXT_REL_CLIP,
        }
    }

    fn dec_geo(&self) -> DecoderGeometry {
        DecoderGeometry {
            dim: self.decoder.proj,
            hidden: self.decoder.hidden,
            heads: self.decoder.heads,
            audio_dim: self.audio_dim,
            text_dim: self.text_encoder.dim,
        }
    }

    /// Text encoder parameters, excluding the shared embedding.
    pub fn count_text_encoder(&self) -> usize {
        let t = &self.text_encoder;
        let e = self.decoder.proj;
        let body = match t.kind {
            TextEncoderKind::Bilstm => (0..t.layers)
                .map(|l| {
                    let input = if l == 0 { e } else { t.dim };
                    2 * Lstmp::count(input, t.cell, t.dim / 2)
                })
                .sum(),
            TextEncoderKind::Conformer => {
                let proj = if t.dim != e { Linear::count(e, t.dim, true) } else { 0 };
                proj + t.layers * ConformerLayer::count(self.text_geo())
            }
        };
        body + t.dim
    }

    /// Everything outside the text encoder: embedding, decoder stack,
    /// final norm and output softmax.
    pub fn count_decoder(&self) -> usize {
        let p = self.decoder.proj;
        self.vocab * p
            + self.decoder.layers * DecoderLayer::count(self.dec_geo())
            + LayerNorm::count(p)
            + Linear::count(p, self.vocab, true)
    }

    pub fn count(&self) -> usize {
        self.count_text_encoder() + self.count_decoder()
    }
}

#[derive(Clone, Debug)]
enum TextBody {
    Bilstm(Vec<(Lstmp, Lstmp)>),
    Conformer {
        proj: Option<Linear>,
        layers: Vec<ConformerLayer>,
    },
}

/// Audio and hypothesis-text contexts for one utterance.
#[derive(Clone, Debug)]
pub struct TwoSourceContext {
    /// `[T', audio_dim]`
    pub audio: Tensor,
    /// `[S, text_dim]`; a single null row for an empty hypothesis.
    pub text: Tensor,
}

#[derive(Clone, Debug)]
pub struct Deliberation {
    pub cfg: DeliberationConfig,
    embed: ParamId,
    text: TextBody,
    null: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    out: Linear,
    /// Ablation switch: drop the text cross-attention sub-layers.
    pub use_text: bool,
}

impl Deliberation {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &DeliberationConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let p = |n: &str| format!("{prefix}.{n}");
        let e = cfg.decoder.proj;
        let embed = store.add_normal(p("embed"), &[cfg.vocab, e], 1.0 / (e as f64).sqrt(), rng)?;
        let t = &cfg.text_encoder;
        let text = match t.kind {
            TextEncoderKind::Bilstm => {
                let mut layers = Vec::new();
                for l in 0..t.layers {
                    let input = if l == 0 { e } else { t.dim };
                    let f = Lstmp::new(store, &p(&format!("text.{l}.fwd")), input, t.cell, t.dim / 2, rng)?;
                    let b = Lstmp::new(store, &p(&format!("text.{l}.bwd")), input, t.cell, t.dim / 2, rng)?;
                    layers.push((f, b));
                }
                TextBody::Bilstm(layers)
            }
            TextEncoderKind::Conformer => {
                let proj = if t.dim != e {
                    Some(Linear::new(store, &p("text.proj"), e, t.dim, true, rng)?)
                } else {
                    None
                };
                let mut layers = Vec::new();
                for l in 0..t.layers {
                    layers.push(ConformerLayer::new(store, &p(&format!("text.{l}")), cfg.text_geo(), rng)?);
                }
                TextBody::Conformer { proj, layers }
            }
        };
        let null = store.add_normal(p("text.null"), &[1, t.dim], 0.1, rng)?;
        let mut layers = Vec::new();
        for l in 0..cfg.decoder.layers {
            layers.push(DecoderLayer::new(store, &p(&format!("dec.{l}")), cfg.dec_geo(), rng)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            text,
            null,
            layers,
            final_norm: LayerNorm::new(store, &p("dec.final_norm"), e)?,
            out: Linear::new(store, &p("dec.out"), e, cfg.vocab, true, rng)?,
            use_text: true,
        })
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i == BLANK || i >= self.cfg.vocab) {
            return Err(Error::invalid(format!("token {bad} is blank or outside the vocabulary")));
        }
        Ok(())
    }

    /// Encode the blank-stripped sampled hypothesis, `[max(S, 1), text_dim]`.
    pub fn encode_text(&self, g: &mut Graph, s: &ParamStore, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Ok(g.param(s, self.null));
        }
        let table = g.param(s, self.embed);
        let x = g.embed(table, tokens)?;
        match &self.text {
            TextBody::Bilstm(layers) => {
                let mut h = x;
                for (f, b) in layers {
                    let hf = f.forward(g, s, h, false)?;
                    let hb = b.forward(g, s, h, true)?;
                    h = g.concat(&[hf, hb], 1)?;
                }
                Ok(h)
            }
            TextBody::Conformer { proj, layers } => {
                let mut h = match proj {
                    Some(p) => p.forward(g, s, x)?,
                    None => x,
                };
                // the whole lookahead budget is spent in the first layer
                for (i, l) in layers.iter().enumerate() {
                    let k = if i == 0 { self.cfg.text_encoder.lookahead } else { 0 };
                    h = l.forward(g, s, h, AttnMask::Lookahead(k))?;
                }
                Ok(h)
            }
        }
    }

    /// Per-position log-distributions `[len(input), V]` for a decoder input
    /// that starts with `<s>`.
    pub fn decoder_logprobs(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        input: &[usize],
        audio: Var,
        text: Var,
    ) -> Result<Var> {
        if input.first() != Some(&SOS) {
            return Err(Error::invalid("decoder input must start with <s>"));
        }
        self.check_tokens(input)?;
        let a = g.shape(audio).to_vec();
        if a.len() != 2 || a[1] != self.cfg.audio_dim {
            return Err(Error::shape(
                "deliberation",
                format!("audio context {a:?}, expected [T, {}]", self.cfg.audio_dim),
            ));
        }
        if g.shape(text)[1] != self.cfg.text_encoder.dim {
            return Err(Error::shape("deliberation", "text context width"));
        }
        let table = g.param(s, self.embed);
        let x = g.embed(table, input)?;
        let pos = g.input(sinusoidal_positions(input.len(), self.cfg.decoder.proj));
        let mut h = g.add(x, pos)?;
        let text = self.use_text.then_some(text);
        for l in &self.layers {
            h = l.forward(g, s, h, audio, text)?;
        }
        let h = self.final_norm.forward(g, s, h)?;
        let logits = self.out.forward(g, s, h)?;
        g.log_softmax(logits)
    }

    /// Build the two contexts for an utterance.
    pub fn context(&self, s: &ParamStore, audio: &Tensor, sampled: &[usize]) -> Result<TwoSourceContext> {
        let mut g = Graph::new();
        let t = self.encode_text(&mut g, s, sampled)?;
        Ok(TwoSourceContext {
            audio: audio.clone(),
            text: g.value(t).clone(),
        })
    }

    fn with_context<R>(
        &self,
        ctx: &TwoSourceContext,
        f: impl FnOnce(&mut Graph, Var, Var) -> Result<R>,
    ) -> Result<R> {
        if ctx.audio.rank() != 2 || ctx.audio.rows() == 0 {
            return Err(Error::invalid("empty audio context"));
        }
        let mut g = Graph::new();
        let a = g.input(ctx.audio.clone());
        let t = g.input(ctx.text.clone());
        f(&mut g, a, t)
    }

    /// Teacher-forced `sum_i log P(y_i | y_<i) + log P(</s> | y)` from one
    /// masked decoder pass.
    pub fn score(&self, s: &ParamStore, ctx: &TwoSourceContext, hyp: &[usize]) -> Result<f64> {
        let input: Vec<usize> = std::iter::once(SOS).chain(hyp.iter().copied()).collect();
        let target: Vec<usize> = hyp.iter().copied().chain(std::iter::once(EOS)).collect();
        self.with_context(ctx, |g, a, t| {
            let lp = self.decoder_logprobs(g, s, &input, a, t)?;
            let picked = g.pick(lp, &target)?;
            Ok(g.value(picked).data().iter().sum())
        })
    }

    /// Same quantity, one decoder run per prefix.
    pub fn score_sequential(&self, s: &ParamStore, ctx: &TwoSourceContext, hyp: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        let mut prefix = vec![SOS];
        for i in 0..=hyp.len() {
            let next = if i < hyp.len() { hyp[i] } else { EOS };
            total += self.with_context(ctx, |g, a, t| {
                let lp = self.decoder_logprobs(g, s, &prefix, a, t)?;
                Ok(g.value(lp).row(prefix.len() - 1)[next])
            })?;
            prefix.push(next);
        }
        Ok(total)
    }

    /// Label-smoothed cross entropy summed over target positions; returns
    /// the loss variable and the number of positions.
    pub fn loss(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        audio: &Tensor,
        sampled: &[usize],
        target: &[usize],
        smoothing: f64,
    ) -> Result<(Var, usize)> {
        let a = g.input(audio.clone());
        let t = self.encode_text(g, s, sampled)?;
        let input: Vec<usize> = std::iter::once(SOS).chain(target.iter().copied()).collect();
        let gold: Vec<usize> = target.iter().copied().chain(std::iter::once(EOS)).collect();
        let lp = self.decoder_logprobs(g, s, &input, a, t)?;
        let picked = g.pick(lp, &gold)?;
        let nll = g.sum_all(picked)?;
        let nll = g.scale(nll, -(1.0 - smoothing))?;
        let loss = if smoothing > 0.0 {
            let all = g.sum_all(lp)?;
            let uniform = g.scale(all, -smoothing / self.cfg.vocab as f64)?;
            g.add(nll, uniform)?
        } else {
            nll
        };
        Ok((loss, gold.len()))
    }
}

/// Score every hypothesis (in parallel) and rerank by
/// `(1 - lambda) * delib + lambda * first_pass`. The sort is stable, so ties
/// keep first-pass order.
pub fn rescore(
    model: &Deliberation,
    s: &ParamStore,
    ctx: &TwoSourceContext,
    hyps: &[Hypothesis],
    lambda: f64,
) -> Result<Vec<Hypothesis>> {
    if hyps.is_empty() {
        return Err(Error::invalid("cannot rescore an empty n-best list"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let scores: Vec<f64> = hyps
        .par_iter()
        .map(|h| model.score(s, ctx, &h.tokens))
        .collect::<Result<_>>()?;
    let mut scored: Vec<Hypothesis> = hyps
        .iter()
        .zip(scores)
        .map(|(h, d)| Hypothesis {
            delib_logp: Some(d),
            ..h.clone()
        })
        .collect();
    rerank(&mut scored, lambda);
    Ok(scored)
}

/// Stable sort of already-scored hypotheses by the interpolated key.
pub fn rerank(hyps: &mut [Hypothesis], lambda: f64) {
    let key = |h: &Hypothesis| {
        if lambda == 1.0 {
            h.first_pass_logp
        } else {
            (1.0 - lambda) * h.delib_logp.unwrap_or(f64::NEG_INFINITY) + lambda * h.first_pass_logp
        }
    };
    hyps.sort_by(|a, b| key(b).total_cmp(&key(a)));
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg(kind: TextEncoderKind) -> DeliberationConfig {
        DeliberationConfig {
            vocab: 12,
            audio_dim: 6,
            text_encoder: TextEncoderConfig {
                kind,
                layers: 2,
                dim: 8,
                cell: 6,
                lookahead: 4,
                heads: 2,
                conv_kernel: 3,
            },
            decoder: DecoderConfig {
                layers: 2,
                hidden: 16,
                proj: 8,
                heads: 2,
            },
            lambda: 0.0,
            label_smoothing: 0.1,
        }
    }

    #[test]
    fn count_matches_construction() {
        for kind in [TextEncoderKind::Bilstm, TextEncoderKind::Conformer] {
            for dim in [8, 10] {
                let mut cfg = tiny_cfg(kind);
                cfg.text_encoder.dim = dim;
                let mut s = ParamStore::new();
                Deliberation::new(&mut s, "delib", &cfg, &mut SeededRng::new(0)).unwrap();
                assert_eq!(s.num_values(), cfg.count(), "{kind} {dim}");
            }
        }
    }

    #[test]
    fn validation() {
        let mut c = tiny_cfg(TextEncoderKind::Conformer);
        c.text_encoder.lookahead = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(TextEncoderKind::Bilstm);
        c.decoder.proj = 9;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(TextEncoderKind::Bilstm);
        c.lambda = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_hypothesis_uses_null_context() {
        let cfg = tiny_cfg(TextEncoderKind::Bilstm);
        let mut s = ParamStore::new();
        let m = Deliberation::new(&mut s, "delib", &cfg, &mut SeededRng::new(0)).unwrap();
        let ctx = m.context(&s, &Tensor::full(vec![3, 6], 0.5), &[]).unwrap();
        assert_eq!(ctx.text.shape(), &[1, 8]);
        assert!(m.score(&s, &ctx, &[5, 6]).unwrap().is_finite());
    }

    #[test]
    fn lambda_one_keeps_order() {
        let mut hyps: Vec<Hypothesis> = (0..4)
            .map(|i| Hypothesis {
                tokens: vec![4 + i],
                first_pass_logp: -(i as f64),
                delib_logp: Some(i as f64),
            })
            .collect();
        let before = hyps.clone();
        rerank(&mut hyps, 1.0);
        assert_eq!(hyps, before);
        rerank(&mut hyps, 0.0);
        assert_eq!(hyps[0].tokens, vec![7]);
    }
}
