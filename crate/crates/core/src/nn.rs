//! Layer building blocks on top of [`Graph`].
//!
//! Every layer registers its parameters in a [`ParamStore`] under a dotted
//! name prefix at construction and reads them back through the graph in
//! `forward`. Each layer also exposes `count`, the closed-form number of
//! scalars it owns, so paper-scale geometries can be sized without
//! allocating them.

use crate::error::{Error, Result};
use crate::graph::{band_mask, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = store.add_weight(join(prefix, "w"), input, output, rng)?;
        let b = if bias {
            Some(store.add_zeros(join(prefix, "b"), &[output])?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            input,
            output,
        })
    }

    pub fn count(input: usize, output: usize, bias: bool) -> usize {
        input * output + if bias { output } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_ones(join(prefix, "gain"), &[dim])?,
            bias: store.add_zeros(join(prefix, "bias"), &[dim])?,
        })
    }

    pub fn count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(s, self.gain), g.param(s, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// LSTM with a projected recurrent output (LSTMP). With `proj == cell` the
/// projection is omitted and the layer is a plain LSTM.
#[derive(Clone, Debug)]
pub struct Lstmp {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    w_p: Option<ParamId>,
    pub input: usize,
    pub cell: usize,
    pub proj: usize,
}

/// Recurrent state of one [`Lstmp`] layer.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl Lstmp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        cell: usize,
        proj: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w_x = store.add_weight(join(prefix, "w_x"), input, 4 * cell, rng)?;
        let w_h = store.add_weight(join(prefix, "w_h"), proj, 4 * cell, rng)?;
        // forget-gate bias starts at 1
        let mut b = vec![0.0; 4 * cell];
        b[cell..2 * cell].fill(1.0);
        let b = store.add(join(prefix, "b"), Tensor::vector(b))?;
        let w_p = if proj != cell {
            Some(store.add_weight(join(prefix, "w_p"), cell, proj, rng)?)
        } else {
            None
        };
        Ok(Self {
            w_x,
            w_h,
            b,
            w_p,
            input,
            cell,
            proj,
        })
    }

    pub fn count(input: usize, cell: usize, proj: usize) -> usize {
        let p = if proj != cell { cell * proj } else { 0 };
        input * 4 * cell + proj * 4 * cell + 4 * cell + p
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState {
            h: Tensor::zeros(vec![1, self.proj]),
            c: Tensor::zeros(vec![1, self.cell]),
        }
    }

    /// One time step on a `[1, input]` row; `h`/`c` are `[1, proj]`/`[1, cell]`.
    pub fn cell_step(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        xw: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let w_h = g.param(s, self.w_h);
        let hw = g.matmul(h, w_h)?;
        let gates = g.add(xw, hw)?;
        let n = self.cell;
        let i = g.slice(gates, 1, 0, n)?;
        let f = g.slice(gates, 1, n, n)?;
        let u = g.slice(gates, 1, 2 * n, n)?;
        let o = g.slice(gates, 1, 3 * n, n)?;
        let (i, f, u, o) = (g.sigmoid(i)?, g.sigmoid(f)?, g.tanh(u)?, g.sigmoid(o)?);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, u)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let m = g.mul(o, tc)?;
        let h = match self.w_p {
            Some(p) => {
                let p = g.param(s, p);
                g.matmul(m, p)?
            }
            None => m,
        };
        Ok((h, c))
    }

    /// Input contribution `x W_x + b` for all rows at once.
    pub fn input_gates(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w_x = g.param(s, self.w_x);
        let b = g.param(s, self.b);
        let xw = g.matmul(x, w_x)?;
        g.add(xw, b)
    }

    /// Run over `x` (`[T, input]`) from a zero state; returns `[T, proj]`.
    /// With `reverse` the sequence is processed last-to-first and the output
    /// is returned in the original order.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let t_len = g.shape(x)[0];
        let xw = self.input_gates(g, s, x)?;
        let st = self.zero_state();
        let mut h = g.input(st.h);
        let mut c = g.input(st.c);
        let mut outs = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let row = g.slice(xw, 0, t, 1)?;
            (h, c) = self.cell_step(g, s, row, h, c)?;
            outs[t] = h;
        }
        g.concat(&outs, 0)
    }

    /// Advance a detached state by one input row (inference).
    pub fn step(&self, s: &ParamStore, x: &Tensor, state: &LstmState) -> Result<(Tensor, LstmState)> {
        let mut g = Graph::new();
        let x = g.input(x.clone());
        let xw = self.input_gates(&mut g, s, x)?;
        let h = g.input(state.h.clone());
        let c = g.input(state.c.clone());
        let (h, c) = self.cell_step(&mut g, s, xw, h, c)?;
        let h = g.value(h).clone();
        Ok((
            h.clone(),
            LstmState {
                h,
                c: g.value(c).clone(),
            },
        ))
    }
}

/// Feed-forward block `W2 act(W1 LN(x) + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
    swish: bool,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        swish: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &join(prefix, "norm"), dim)?,
            up: Linear::new(store, &join(prefix, "up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &join(prefix, "down"), hidden, dim, true, rng)?,
            swish,
        })
    }

    pub fn count(dim: usize, hidden: usize) -> usize {
        LayerNorm::count(dim) + Linear::count(dim, hidden, true) + Linear::count(hidden, dim, true)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, s, x)?;
        let h = self.up.forward(g, s, n)?;
        let h = if self.swish { g.swish(h)? } else { g.relu(h)? };
        self.down.forward(g, s, h)
    }
}

/// Which keys a query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Keys `j <= i + k`; `k = 0` is causal.
    Lookahead(usize),
}

impl AttnMask {
    pub fn build(self, rows: usize, cols: usize) -> Option<Vec<bool>> {
        match self {
            AttnMask::Full => None,
            AttnMask::Lookahead(k) => Some(band_mask(rows, cols, |i, j| j <= i + k)),
        }
    }
}

/// Multi-head attention, optionally with a learned relative-position bias
/// (one scalar per head per clipped offset `j - i`).
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    rel: Option<(ParamId, usize)>,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        rel_clip: Option<usize>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let rel = match rel_clip {
            Some(p) => Some((
                store.add_zeros(join(prefix, "rel_bias"), &[2 * p + 1, heads])?,
                p,
            )),
            None => None,
        };
        Ok(Self {
            q: Linear::new(store, &join(prefix, "q"), dim, dim, true, rng)?,
            k: Linear::new(store, &join(prefix, "k"), context_dim, dim, true, rng)?,
            v: Linear::new(store, &join(prefix, "v"), context_dim, dim, true, rng)?,
            o: Linear::new(store, &join(prefix, "o"), dim, dim, true, rng)?,
            rel,
            heads,
            dim,
        })
    }

    pub fn count(dim: usize, context_dim: usize, heads: usize, rel_clip: Option<usize>) -> usize {
        2 * Linear::count(dim, dim, true)
            + 2 * Linear::count(context_dim, dim, true)
            + rel_clip.map_or(0, |p| (2 * p + 1) * heads)
    }

    /// `query` is `[Tq, dim]`, `context` is `[Tk, context_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        query: Var,
        context: Var,
        mask: AttnMask,
    ) -> Result<Var> {
        let tq = g.shape(query)[0];
        let tk = g.shape(context)[0];
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, context)?;
        let v = self.v.forward(g, s, context)?;
        let dh = self.dim / self.heads;
        let keep = mask.build(tq, tk);
        let bias = match self.rel {
            Some((table, p)) => {
                let ids: Vec<usize> = (0..tq)
                    .flat_map(|i| {
                        (0..tk).map(move |j| (j as isize - i as isize).clamp(-(p as isize), p as isize))
                    })
                    .map(|d| (d + p as isize) as usize)
                    .collect();
                let t = g.param(s, table);
                Some(g.embed(t, &ids)?)
            }
            None => None,
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let sc = g.matmul(qh, kt)?;
            let mut sc = g.scale(sc, scale)?;
            if let Some(b) = bias {
                let col = g.slice(b, 1, h, 1)?;
                let bm = g.reshape(col, &[tq, tk])?;
                sc = g.add(sc, bm)?;
            }
            let p = g.masked_softmax(sc, keep.as_deref())?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        self.o.forward(g, s, cat)
    }
}

/// Conformer block: half-step feed-forward, self-attention, convolution
/// module, half-step feed-forward, final norm.
///
/// The depthwise convolution is always left-padded (reads frames
/// `t-K+1..=t`), so any right context comes from the attention mask alone.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    ff1: FeedForward,
    attn_norm: LayerNorm,
    attn: Attention,
    conv_norm: LayerNorm,
    pw1: Linear,
    dw: ParamId,
    dw_norm: LayerNorm,
    pw2: Linear,
    ff2: FeedForward,
    out_norm: LayerNorm,
    pub dim: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConformerGeometry {
    pub dim: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ff_mult: usize,
    pub rel_clip: usize,
}

impl ConformerLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        geo: ConformerGeometry,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if geo.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conformer kernel must be odd, got {}",
                geo.kernel
            )));
        }
        let d = geo.dim;
        let dw_std = 1.0 / (geo.kernel as f64).sqrt();
        Ok(Self {
            ff1: FeedForward::new(store, &join(prefix, "ff1"), d, d * geo.ff_mult, true, rng)?,
            attn_norm: LayerNorm::new(store, &join(prefix, "attn_norm"), d)?,
            attn: Attention::new(
                store,
                &join(prefix, "attn"),
                d,
                d,
                geo.heads,
                Some(geo.rel_clip),
                rng,
            )?,
            conv_norm: LayerNorm::new(store, &join(prefix, "conv_norm"), d)?,
            pw1: Linear::new(store, &join(prefix, "pw1"), d, 2 * d, true, rng)?,
            dw: store.add_normal(join(prefix, "dw"), &[geo.kernel, d], dw_std, rng)?,
            dw_norm: LayerNorm::new(store, &join(prefix, "dw_norm"), d)?,
            pw2: Linear::new(store, &join(prefix, "pw2"), d, d, true, rng)?,
            ff2: FeedForward::new(store, &join(prefix, "ff2"), d, d * geo.ff_mult, true, rng)?,
            out_norm: LayerNorm::new(store, &join(prefix, "out_norm"), d)?,
            dim: d,
            kernel: geo.kernel,
        })
    }

    pub fn count(geo: ConformerGeometry) -> usize {
        let d = geo.dim;
        2 * FeedForward::count(d, d * geo.ff_mult)
            + LayerNorm::count(d)
            + Attention::count(d, d, geo.heads, Some(geo.rel_clip))
            + LayerNorm::count(d)
            + Linear::count(d, 2 * d, true)
            + geo.kernel * d
            + LayerNorm::count(d)
            + Linear::count(d, d, true)
            + LayerNorm::count(d)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, mask: AttnMask) -> Result<Var> {
        let f = self.ff1.forward(g, s, x)?;
        let f = g.scale(f, 0.5)?;
        let x = g.add(x, f)?;

        let n = self.attn_norm.forward(g, s, x)?;
        let a = self.attn.forward(g, s, n, n, mask)?;
        let x = g.add(x, a)?;

        let n = self.conv_norm.forward(g, s, x)?;
        let p = self.pw1.forward(g, s, n)?;
        let d = self.dim;
        let val = g.slice(p, 1, 0, d)?;
        let gate = g.slice(p, 1, d, d)?;
        let gate = g.sigmoid(gate)?;
        let glu = g.mul(val, gate)?;
        let w = g.param(s, self.dw);
        let c = g.conv1d(glu, w, self.kernel - 1)?;
        let c = self.dw_norm.forward(g, s, c)?;
        let c = g.swish(c)?;
        let c = self.pw2.forward(g, s, c)?;
        let x = g.add(x, c)?;

        let f = self.ff2.forward(g, s, x)?;
        let f = g.scale(f, 0.5)?;
        let x = g.add(x, f)?;
        self.out_norm.forward(g, s, x)
    }
}

/// Pre-norm transformer decoder block with causal self-attention followed by
/// cross-attention to the audio context and then to the text context.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: Attention,
    audio_norm: LayerNorm,
    audio_attn: Attention,
    text_norm: LayerNorm,
    text_attn: Attention,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderGeometry {
    pub dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        geo: DecoderGeometry,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d = geo.dim;
        Ok(Self {
            self_norm: LayerNorm::new(store, &join(prefix, "self_norm"), d)?,
            self_attn: Attention::new(store, &join(prefix, "self_attn"), d, d, geo.heads, None, rng)?,
            audio_norm: LayerNorm::new(store, &join(prefix, "audio_norm"), d)?,
            audio_attn: Attention::new(
                store,
                &join(prefix, "audio_attn"),
                d,
                geo.audio_dim,
                geo.heads,
                None,
                rng,
            )?,
            text_norm: LayerNorm::new(store, &join(prefix, "text_norm"), d)?,
            text_attn: Attention::new(
                store,
                &join(prefix, "text_attn"),
                d,
                geo.text_dim,
                geo.heads,
                None,
                rng,
            )?,
            ff: FeedForward::new(store, &join(prefix, "ff"), d, geo.hidden, false, rng)?,
        })
    }

    pub fn count(geo: DecoderGeometry) -> usize {
        let d = geo.dim;
        3 * LayerNorm::count(d)
            + Attention::count(d, d, geo.heads, None)
            + Attention::count(d, geo.audio_dim, geo.heads, None)
            + Attention::count(d, geo.text_dim, geo.heads, None)
            + FeedForward::count(d, geo.hidden)
    }

    /// `text = None` removes the text cross-attention sub-layer (ablation).
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        audio: Var,
        text: Option<Var>,
    ) -> Result<Var> {
        let n = self.self_norm.forward(g, s, x)?;
        let a = self.self_attn.forward(g, s, n, n, AttnMask::Lookahead(0))?;
        let x = g.add(x, a)?;

        let n = self.audio_norm.forward(g, s, x)?;
        let a = self.audio_attn.forward(g, s, n, audio, AttnMask::Full)?;
        let mut x = g.add(x, a)?;

        if let Some(text) = text {
            let n = self.text_norm.forward(g, s, x)?;
            let a = self.text_attn.forward(g, s, n, text, AttnMask::Full)?;
            x = g.add(x, a)?;
        }
        let f = self.ff.forward(g, s, x)?;
        g.add(x, f)
    }
}

/// Fixed sinusoidal position table, `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * rate;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn counts_match_construction() {
        let mut rng = SeededRng::new(1);
        let mut s = ParamStore::new();
        let geo = ConformerGeometry {
            dim: 8,
            heads: 2,
            kernel: 3,
            ff_mult: 4,
            rel_clip: 4,
        };
        ConformerLayer::new(&mut s, "c", geo, &mut rng).unwrap();
        assert_eq!(s.num_values(), ConformerLayer::count(geo));

        let mut s = ParamStore::new();
        let dg = DecoderGeometry {
            dim: 8,
            hidden: 16,
            heads: 2,
            audio_dim: 6,
            text_dim: 10,
        };
        DecoderLayer::new(&mut s, "d", dg, &mut rng).unwrap();
        assert_eq!(s.num_values(), DecoderLayer::count(dg));

        let mut s = ParamStore::new();
        Lstmp::new(&mut s, "l", 5, 7, 3, &mut rng).unwrap();
        Lstmp::new(&mut s, "m", 5, 7, 7, &mut rng).unwrap();
        assert_eq!(s.num_values(), Lstmp::count(5, 7, 3) + Lstmp::count(5, 7, 7));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut s = ParamStore::new();
        let geo = ConformerGeometry {
            dim: 4,
            heads: 1,
            kernel: 4,
            ff_mult: 2,
            rel_clip: 2,
        };
        assert!(ConformerLayer::new(&mut s, "c", geo, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn conformer_zero_in_zero_out() {
        let mut rng = SeededRng::new(3);
        let mut s = ParamStore::new();
        let geo = ConformerGeometry {
            dim: 8,
            heads: 2,
            kernel: 3,
            ff_mult: 2,
            rel_clip: 3,
        };
        let layer = ConformerLayer::new(&mut s, "c", geo, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![5, 8]));
        let y = layer.forward(&mut g, &s, x, AttnMask::Lookahead(0)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_matches_sequence_forward() {
        let mut rng = SeededRng::new(4);
        let mut s = ParamStore::new();
        let l = Lstmp::new(&mut s, "l", 3, 5, 2, &mut rng).unwrap();
        let x = random_input(&mut rng, 4, 3);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = l.forward(&mut g, &s, xv, false).unwrap();
        let mut st = l.zero_state();
        for t in 0..4 {
            let row = Tensor::new(vec![1, 3], x.row(t).to_vec()).unwrap();
            let (h, next) = l.step(&s, &row, &st).unwrap();
            st = next;
            for (a, b) in h.data().iter().zip(g.value(y).row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinusoid_first_row() {
        let p = sinusoidal_positions(2, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }
}
