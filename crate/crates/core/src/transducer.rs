//! First-pass transducer: prediction network, joint network and the
//! transducer loss.

use crate::encoder::{Encoder, EncoderConfig, EncoderOutputs};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, LstmState, Lstmp};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{log_sum_exp, Tensor};
use crate::tokenizer::{BLANK, SOS};

#[derive(Clone, Debug, PartialEq)]
pub struct TransducerConfig {
    pub vocab: usize,
    pub pred_layers: usize,
    pub pred_dim: usize,
    pub pred_proj: usize,
    pub joint_dim: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        Self {
            vocab: 16_384,
            pred_layers: 2,
            pred_dim: 2048,
            pred_proj: 640,
            joint_dim: 640,
        }
    }
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= crate::tokenizer::NUM_RESERVED {
            return Err(Error::Config(format!("vocab size {} too small", self.vocab)));
        }
        if self.pred_dim == 0 || self.pred_proj == 0 || self.joint_dim == 0 {
            return Err(Error::Config("transducer dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Embedding, LSTM stack and joint network (the encoder is counted separately).
    pub fn count(&self, enc_dim: usize) -> usize {
        let p = self.pred_proj;
        self.vocab * p
            + self.pred_layers * Lstmp::count(p, self.pred_dim, p)
            + Linear::count(enc_dim, self.joint_dim, true)
            + Linear::count(p, self.joint_dim, false)
            + Linear::count(self.joint_dim, self.vocab, true)
    }
}

/// Label-conditioned LSTM stack. Position 0 of its output is the state after
/// the start symbol; position `u` has seen labels `< u` only.
#[derive(Clone, Debug)]
pub struct PredictionNet {
    embed: ParamId,
    layers: Vec<Lstmp>,
    vocab: usize,
}

/// Detached prediction-network state for incremental decoding.
#[derive(Clone, Debug)]
pub struct PredState {
    /// `[1, pred_proj]`
    pub out: Tensor,
    pub layers: Vec<LstmState>,
}

impl PredictionNet {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &TransducerConfig, rng: &mut SeededRng) -> Result<Self> {
        let p = cfg.pred_proj;
        let embed = store.add_normal(format!("{prefix}.embed"), &[cfg.vocab, p], 1.0 / (p as f64).sqrt(), rng)?;
        let mut layers = Vec::new();
        for i in 0..cfg.pred_layers {
            layers.push(Lstmp::new(store, &format!("{prefix}.lstm.{i}"), p, cfg.pred_dim, p, rng)?);
        }
        Ok(Self {
            embed,
            layers,
            vocab: cfg.vocab,
        })
    }

    fn check_history(&self, history: &[usize]) -> Result<()> {
        if let Some(&bad) = history.iter().find(|&&id| id == BLANK || id >= self.vocab) {
            return Err(Error::invalid(format!("history token {bad} is blank or out of range")));
        }
        Ok(())
    }

    /// `[U+1, pred_proj]` states for `history` of length `U`.
    pub fn predict(&self, g: &mut Graph, s: &ParamStore, history: &[usize]) -> Result<Var> {
        self.check_history(history)?;
        let ids: Vec<usize> = std::iter::once(SOS).chain(history.iter().copied()).collect();
        let table = g.param(s, self.embed);
        let mut h = g.embed(table, &ids)?;
        for l in &self.layers {
            h = l.forward(g, s, h, false)?;
        }
        Ok(h)
    }

    pub fn start(&self, s: &ParamStore) -> Result<PredState> {
        let init = PredState {
            out: Tensor::zeros(vec![1, 1]),
            layers: self.layers.iter().map(Lstmp::zero_state).collect(),
        };
        self.feed(s, &init, SOS)
    }

    /// Consume one more label.
    pub fn feed(&self, s: &ParamStore, state: &PredState, label: usize) -> Result<PredState> {
        if label == BLANK || label >= self.vocab {
            return Err(Error::invalid(format!("cannot feed token {label} to the prediction net")));
        }
        let row = s.value(self.embed).row(label).to_vec();
        let mut x = Tensor::new(vec![1, row.len()], row)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, st) in self.layers.iter().zip(&state.layers) {
            let (h, next) = l.step(s, &x, st)?;
            layers.push(next);
            x = h;
        }
        Ok(PredState { out: x, layers })
    }
}

#[derive(Clone, Debug)]
pub struct JointNet {
    enc_proj: Linear,
    pred_proj: Linear,
    out: Linear,
}

impl JointNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        enc_dim: usize,
        cfg: &TransducerConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            enc_proj: Linear::new(store, &format!("{prefix}.enc_proj"), enc_dim, cfg.joint_dim, true, rng)?,
            pred_proj: Linear::new(store, &format!("{prefix}.pred_proj"), cfg.pred_proj, cfg.joint_dim, false, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), cfg.joint_dim, cfg.vocab, true, rng)?,
        })
    }

    /// Lattice log-probabilities `[T * (U+1), V]`, row `t * (U+1) + u`.
    pub fn join(&self, g: &mut Graph, s: &ParamStore, enc: Var, pred: Var) -> Result<Var> {
        let a = self.enc_proj.forward(g, s, enc)?;
        let b = self.pred_proj.forward(g, s, pred)?;
        let h = g.add_outer(a, b)?;
        let h = g.tanh(h)?;
        let logits = self.out.forward(g, s, h)?;
        g.log_softmax(logits)
    }

    /// Projected encoder frames, computed once per utterance for decoding.
    pub fn project_encoder(&self, s: &ParamStore, enc: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = g.input(enc.clone());
        let a = self.enc_proj.forward(&mut g, s, e)?;
        Ok(g.value(a).clone())
    }

    /// Log-distribution over the vocabulary from one projected encoder row
    /// and one prediction-network output.
    pub fn step_logprobs(&self, s: &ParamStore, enc_row: &[f64], pred_out: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![1, enc_row.len()], enc_row.to_vec())?);
        let p = g.input(pred_out.clone());
        let b = self.pred_proj.forward(&mut g, s, p)?;
        let h = g.add(a, b)?;
        let h = g.tanh(h)?;
        let logits = self.out.forward(&mut g, s, h)?;
        let lp = g.log_softmax(logits)?;
        Ok(g.value(lp).data().to_vec())
    }
}

/// Log-probabilities over encoder frames x label positions x vocabulary.
#[derive(Clone, Debug)]
pub struct AlignmentLattice {
    pub frames: usize,
    /// `U + 1`
    pub positions: usize,
    pub vocab: usize,
    /// Row-major `[frames, positions, vocab]`.
    pub logp: Vec<f64>,
}

impl AlignmentLattice {
    pub fn new(frames: usize, positions: usize, vocab: usize, logp: Vec<f64>) -> Result<Self> {
        if frames == 0 || positions == 0 || vocab == 0 || logp.len() != frames * positions * vocab {
            return Err(Error::shape(
                "lattice",
                format!("{} values for {frames}x{positions}x{vocab}", logp.len()),
            ));
        }
        Ok(Self {
            frames,
            positions,
            vocab,
            logp,
        })
    }

    pub fn at(&self, t: usize, u: usize) -> &[f64] {
        let o = (t * self.positions + u) * self.vocab;
        &self.logp[o..o + self.vocab]
    }
}

/// Output of the forward-backward recursions.
#[derive(Clone, Debug)]
pub struct RnntResult {
    /// `-log P(labels | lattice)`
    pub loss: f64,
    /// `d loss / d logp`, same layout as the lattice.
    pub grad: Vec<f64>,
    /// `[T, U+1]` forward log-variables.
    pub alpha: Vec<f64>,
    /// `[T, U+1]` backward log-variables.
    pub beta: Vec<f64>,
}

impl RnntResult {
    pub fn log_prob_from_beta(&self) -> f64 {
        self.beta[0]
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Transducer loss by log-space forward-backward over the alignment lattice.
pub fn rnnt_forward_backward(lat: &AlignmentLattice, labels: &[usize]) -> Result<RnntResult> {
    let (t_len, u1, v) = (lat.frames, lat.positions, lat.vocab);
    if labels.len() + 1 != u1 {
        return Err(Error::shape(
            "rnnt_loss",
            format!("{} labels for {u1} lattice positions", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= v) {
        return Err(Error::invalid(format!("label {bad} is blank or outside the vocabulary")));
    }
    if lat.logp.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("alignment lattice".into()));
    }
    let u_len = labels.len();
    let idx = |t: usize, u: usize| t * u1 + u;
    let blank = |t: usize, u: usize| lat.at(t, u)[BLANK];
    let emit = |t: usize, u: usize| lat.at(t, u)[labels[u]];

    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    for t in 0..t_len {
        for u in 0..u1 {
            alpha[idx(t, u)] = if t == 0 && u == 0 {
                0.0
            } else {
                let from_t = if t > 0 {
                    alpha[idx(t - 1, u)] + blank(t - 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                let from_u = if u > 0 {
                    alpha[idx(t, u - 1)] + emit(t, u - 1)
                } else {
                    f64::NEG_INFINITY
                };
                lse2(from_t, from_u)
            };
        }
    }
    let log_p = alpha[idx(t_len - 1, u_len)] + blank(t_len - 1, u_len);

    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            beta[idx(t, u)] = if t == t_len - 1 && u == u_len {
                blank(t, u)
            } else {
                let via_blank = if t + 1 < t_len {
                    beta[idx(t + 1, u)] + blank(t, u)
                } else {
                    f64::NEG_INFINITY
                };
                let via_emit = if u < u_len {
                    beta[idx(t, u + 1)] + emit(t, u)
                } else {
                    f64::NEG_INFINITY
                };
                lse2(via_blank, via_emit)
            };
        }
    }

    let mut grad = vec![0.0; lat.logp.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[idx(t, u)];
            let base = (t * u1 + u) * v;
            let next_blank = if t + 1 < t_len {
                beta[idx(t + 1, u)]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[base + BLANK] = -(a + blank(t, u) + next_blank - log_p).exp();
            if u < u_len {
                grad[base + labels[u]] = -(a + emit(t, u) + beta[idx(t, u + 1)] - log_p).exp();
            }
        }
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("transducer log-probability".into()));
    }
    Ok(RnntResult {
        loss: -log_p,
        grad,
        alpha,
        beta,
    })
}

/// Record the transducer loss of a lattice variable (`[T*(U+1), V]` from
/// [`JointNet::join`]) on the tape.
pub fn rnnt_loss(g: &mut Graph, lattice: Var, frames: usize, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(lattice).to_vec();
    let u1 = labels.len() + 1;
    if shape.len() != 2 || shape[0] != frames * u1 {
        return Err(Error::shape("rnnt_loss", format!("lattice {shape:?} for T={frames}, U={}", labels.len())));
    }
    let lat = AlignmentLattice::new(frames, u1, shape[1], g.value(lattice).data().to_vec())?;
    let r = rnnt_forward_backward(&lat, labels)?;
    g.scalar_with_grad(lattice, r.loss, r.grad)
}

/// `logsumexp(alpha + beta)` along the anti-diagonal `t + u = n`.
pub fn diagonal_log_prob(r: &RnntResult, frames: usize, positions: usize, n: usize) -> f64 {
    let terms: Vec<f64> = (0..frames)
        .filter(|&t| n >= t && n - t < positions)
        .map(|t| {
            let i = t * positions + (n - t);
            r.alpha[i] + r.beta[i]
        })
        .collect();
    log_sum_exp(&terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderSource {
    Causal,
    Noncausal,
}

impl std::str::FromStr for EncoderSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Self::Causal),
            "noncausal" => Ok(Self::Noncausal),
            _ => Err(Error::invalid(format!("unknown encoder source {s:?}"))),
        }
    }
}

impl std::fmt::Display for EncoderSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Causal => "causal",
            Self::Noncausal => "noncausal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const DEFAULT_CAUSAL_PROB: f64 = 0.4;

/// Per-utterance training draw of the encoder feeding the joint network.
pub fn select_encoder_source(mode: Mode, p_causal: f64, rng: &mut SeededRng) -> Result<EncoderSource> {
    if mode == Mode::Eval {
        return Err(Error::invalid("encoder source is sampled only in training"));
    }
    if !(0.0..=1.0).contains(&p_causal) {
        return Err(Error::invalid(format!("probability {p_causal} outside [0, 1]")));
    }
    Ok(if rng.bernoulli(p_causal) {
        EncoderSource::Causal
    } else {
        EncoderSource::Noncausal
    })
}

impl EncoderOutputs {
    pub fn select(&self, source: EncoderSource) -> &Tensor {
        match source {
            EncoderSource::Causal => &self.causal,
            EncoderSource::Noncausal => &self.noncausal,
        }
    }
}

/// The complete first-pass model.
#[derive(Clone, Debug)]
pub struct FirstPass {
    pub encoder: Encoder,
    pub pred: PredictionNet,
    pub joint: JointNet,
    pub vocab: usize,
}

impl FirstPass {
    pub fn new(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        trans: &TransducerConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        trans.validate()?;
        Ok(Self {
            encoder: Encoder::new(store, "enc", enc, rng)?,
            pred: PredictionNet::new(store, "pred", trans, rng)?,
            joint: JointNet::new(store, "joint", enc.dim, trans, rng)?,
            vocab: trans.vocab,
        })
    }

    pub fn count(enc: &EncoderConfig, trans: &TransducerConfig) -> usize {
        enc.count() + trans.count(enc.dim)
    }

    /// Transducer loss of one utterance given stacked features.
    pub fn loss(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        stacked: &Tensor,
        labels: &[usize],
        source: EncoderSource,
    ) -> Result<Var> {
        let x = g.input(stacked.clone());
        let enc = match source {
            EncoderSource::Causal => self.encoder.causal(g, s, x)?,
            EncoderSource::Noncausal => self.encoder.forward(g, s, x)?.noncausal,
        };
        let frames = g.shape(enc)[0];
        let pred = self.pred.predict(g, s, labels)?;
        let lat = self.joint.join(g, s, enc, pred)?;
        rnnt_loss(g, lat, frames, labels)
    }
}
