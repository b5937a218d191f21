//! Optimizers, learning-rate schedules, EMA, gradient capping and batch
//! sampling.

use crate::error::{Error, Result};
use crate::graph::GradMap;
use crate::params::{NamedTensors, ParamStore, Precision};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_GRAD_CAP: f64 = 5.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const ADAFACTOR_EPS: f64 = 1e-30;
const ADAFACTOR_DECAY_EXP: f64 = 0.8;
const ADAFACTOR_MIN_DECAY: f64 = 1e-3;
const ADAFACTOR_CLIP: f64 = 1.0;

/// Rescale `grad` in place so its L2 norm is at most `cap`. Returns the
/// norm before capping.
pub fn clip_per_param(grad: &mut [f64], cap: f64) -> Result<f64> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > cap {
        let k = cap / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Bias-corrected Adam step; `step` counts from 1.
pub fn adam_update(param: &mut [f64], grad: &[f64], st: &mut AdamState, lr: f64, step: u64) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::invalid(format!("negative learning rate {lr}")));
    }
    if param.len() != grad.len() || st.m.len() != grad.len() {
        return Err(Error::shape("adam", "state/grad/param sizes differ"));
    }
    let c1 = 1.0 - ADAM_BETA1.powf(step as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i];
        st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g;
        st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = st.m[i] / c1;
        let vh = st.v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Second-moment state: factored row/column statistics for matrices, a full
/// accumulator otherwise.
#[derive(Clone, Debug, PartialEq)]
pub enum AdafactorState {
    Factored { rows: Vec<f64>, cols: Vec<f64> },
    Full { v: Vec<f64> },
}

impl AdafactorState {
    pub fn new(shape: &[usize]) -> Self {
        match shape {
            [n, m] => Self::Factored {
                rows: vec![0.0; *n],
                cols: vec![0.0; *m],
            },
            _ => Self::Full {
                v: vec![0.0; shape.iter().product()],
            },
        }
    }

    pub fn num_accumulators(&self) -> usize {
        match self {
            Self::Factored { rows, cols } => rows.len() + cols.len(),
            Self::Full { v } => v.len(),
        }
    }
}

/// Step-dependent decay `1 - t^-0.8`, with the new-information weight kept
/// at or above 1e-3.
pub fn adafactor_decay(step: u64) -> f64 {
    let w = (step.max(1) as f64).powf(-ADAFACTOR_DECAY_EXP);
    1.0 - w.max(ADAFACTOR_MIN_DECAY)
}

/// Adafactor step without momentum; the RMS of each update is clipped to 1.
pub fn adafactor_update(
    param: &mut [f64],
    grad: &[f64],
    st: &mut AdafactorState,
    lr: f64,
    step: u64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::invalid(format!("negative learning rate {lr}")));
    }
    if param.len() != grad.len() {
        return Err(Error::shape("adafactor", "grad/param sizes differ"));
    }
    let beta = adafactor_decay(step);
    let mut upd = vec![0.0; grad.len()];
    match st {
        AdafactorState::Factored { rows, cols } => {
            let (n, m) = (rows.len(), cols.len());
            if n * m != grad.len() {
                return Err(Error::shape("adafactor", "factored state does not match grad"));
            }
            for i in 0..n {
                let mean = grad[i * m..(i + 1) * m].iter().map(|g| g * g + ADAFACTOR_EPS).sum::<f64>() / m as f64;
                rows[i] = beta * rows[i] + (1.0 - beta) * mean;
            }
            for j in 0..m {
                let mean = (0..n).map(|i| grad[i * m + j].powi(2) + ADAFACTOR_EPS).sum::<f64>() / n as f64;
                cols[j] = beta * cols[j] + (1.0 - beta) * mean;
            }
            let row_mean = rows.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                for j in 0..m {
                    let vhat = rows[i] * cols[j] / row_mean;
                    upd[i * m + j] = grad[i * m + j] / vhat.sqrt();
                }
            }
        }
        AdafactorState::Full { v } => {
            if v.len() != grad.len() {
                return Err(Error::shape("adafactor", "state does not match grad"));
            }
            for i in 0..grad.len() {
                v[i] = beta * v[i] + (1.0 - beta) * (grad[i] * grad[i] + ADAFACTOR_EPS);
                upd[i] = grad[i] / v[i].sqrt();
            }
        }
    }
    let rms = (upd.iter().map(|u| u * u).sum::<f64>() / upd.len() as f64).sqrt();
    let denom = (rms / ADAFACTOR_CLIP).max(1.0);
    for (p, u) in param.iter_mut().zip(&upd) {
        *p -= lr * u / denom;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adafactor,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "adafactor" => Ok(Self::Adafactor),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Adafactor => "adafactor",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum SlotState {
    Adam(AdamState),
    Adafactor(AdafactorState),
}

/// Optimizer state for every trainable parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    slots: Vec<Option<SlotState>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let slots = store
            .iter()
            .map(|(_, p)| {
                (!p.frozen).then(|| match kind {
                    OptimizerKind::Adam => SlotState::Adam(AdamState::new(p.value.len())),
                    OptimizerKind::Adafactor => SlotState::Adafactor(AdafactorState::new(p.value.shape())),
                })
            })
            .collect();
        Self { kind, step: 0, slots }
    }

    /// Apply one update. Values of parameters and state are rounded to
    /// `precision` afterwards so that checkpoints hold them exactly.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64, precision: Precision) -> Result<()> {
        self.step += 1;
        for (id, g) in grads.iter() {
            let Some(slot) = self.slots[id.index()].as_mut() else {
                return Err(Error::invalid(format!(
                    "gradient for frozen parameter {}",
                    store.get(id).name
                )));
            };
            let value = store.value_mut(id);
            let p = value.data_mut();
            match slot {
                SlotState::Adam(st) => {
                    adam_update(p, g, st, lr, self.step)?;
                    precision.round_slice(&mut st.m);
                    precision.round_slice(&mut st.v);
                }
                SlotState::Adafactor(st) => {
                    adafactor_update(p, g, st, lr, self.step)?;
                    match st {
                        AdafactorState::Factored { rows, cols } => {
                            precision.round_slice(rows);
                            precision.round_slice(cols);
                        }
                        AdafactorState::Full { v } => precision.round_slice(v),
                    }
                }
            }
            precision.round_slice(p);
            let finite = p.iter().all(|x| x.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!("parameter {} after update", store.get(id).name)));
            }
        }
        Ok(())
    }

    /// Accumulator count of every slot, in parameter order.
    pub fn state_sizes(&self) -> Vec<usize> {
        self.slots
            .iter()
            .flatten()
            .map(|s| match s {
                SlotState::Adam(a) => a.m.len() + a.v.len(),
                SlotState::Adafactor(a) => a.num_accumulators(),
            })
            .collect()
    }

    pub fn to_named(&self, store: &ParamStore, prefix: &str) -> NamedTensors {
        let mut out = NamedTensors::default();
        out.push(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        for ((_, p), slot) in store.iter().zip(&self.slots) {
            let name = &p.name;
            match slot {
                Some(SlotState::Adam(a)) => {
                    out.push(format!("{prefix}{name}.m"), Tensor::vector(a.m.clone()));
                    out.push(format!("{prefix}{name}.v"), Tensor::vector(a.v.clone()));
                }
                Some(SlotState::Adafactor(AdafactorState::Factored { rows, cols })) => {
                    out.push(format!("{prefix}{name}.rows"), Tensor::vector(rows.clone()));
                    out.push(format!("{prefix}{name}.cols"), Tensor::vector(cols.clone()));
                }
                Some(SlotState::Adafactor(AdafactorState::Full { v })) => {
                    out.push(format!("{prefix}{name}.v"), Tensor::vector(v.clone()));
                }
                None => {}
            }
        }
        out
    }

    pub fn load_named(&mut self, store: &ParamStore, t: &NamedTensors, prefix: &str) -> Result<()> {
        let get = |n: String, len: usize| -> Result<Vec<f64>> {
            let v = t
                .get(&n)
                .ok_or_else(|| Error::format("checkpoint", format!("missing {n}")))?;
            if v.len() != len {
                return Err(Error::format("checkpoint", format!("{n} has {} values, expected {len}", v.len())));
            }
            Ok(v.data().to_vec())
        };
        self.step = get(format!("{prefix}step"), 1)?[0] as u64;
        for ((_, p), slot) in store.iter().zip(self.slots.iter_mut()) {
            let name = &p.name;
            match slot {
                Some(SlotState::Adam(a)) => {
                    a.m = get(format!("{prefix}{name}.m"), a.m.len())?;
                    a.v = get(format!("{prefix}{name}.v"), a.v.len())?;
                }
                Some(SlotState::Adafactor(AdafactorState::Factored { rows, cols })) => {
                    *rows = get(format!("{prefix}{name}.rows"), rows.len())?;
                    *cols = get(format!("{prefix}{name}.cols"), cols.len())?;
                }
                Some(SlotState::Adafactor(AdafactorState::Full { v })) => {
                    *v = get(format!("{prefix}{name}.v"), v.len())?;
                }
                None => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    LinearWarmupConstant,
    Transformer,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_warmup_constant" => Ok(Self::LinearWarmupConstant),
            "transformer" => Ok(Self::Transformer),
            _ => Err(Error::Config(format!("unknown lr schedule {s:?}"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LinearWarmupConstant => "linear_warmup_constant",
            Self::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    /// Target of the linear kind, peak of the transformer kind.
    pub peak_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be positive".into()));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.peak_lr)));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, sched: &Schedule) -> f64 {
    let s = step as f64;
    let w = sched.warmup_steps as f64;
    match sched.kind {
        ScheduleKind::LinearWarmupConstant => sched.peak_lr * (s / w).min(1.0),
        ScheduleKind::Transformer => {
            if step == 0 {
                0.0
            } else {
                sched.peak_lr * (s / w).min((w / s).sqrt())
            }
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * param` for every parameter.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64, precision: Precision) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1]")));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let src = params.value(id).data();
        let dst = ema.value_mut(id).data_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("ema", "EMA store does not mirror parameters"));
        }
        for (e, &p) in dst.iter_mut().zip(src) {
            *e = decay * *e + (1.0 - decay) * p;
        }
        precision.round_slice(dst);
    }
    Ok(())
}

/// Draw `batch_size` utterance indices i.i.d. and uniformly from the pooled
/// corpus, so each language appears in proportion to its share of the data.
pub fn sample_batch(corpus_size: usize, rng: &mut SeededRng, batch_size: usize) -> Result<Vec<usize>> {
    if corpus_size == 0 {
        return Err(Error::invalid("cannot sample from an empty corpus"));
    }
    Ok((0..batch_size).map(|_| rng.below(corpus_size)).collect())
}
