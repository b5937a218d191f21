//! Causal conformer encoder and the cascaded non-causal encoder on top of it.
//!
//! Causal stack: input projection, `first_block_layers` conformers at `dim`,
//! time stacking x2 (30 ms -> 60 ms), one conformer at `wide_layer_dim`,
//! projection back to `dim`, then the remaining conformers. The cascaded
//! stack adds `right_context_frames / noncausal_layers` frames of attention
//! lookahead per layer.

use crate::error::{Error, Result};
use crate::frontend::STACKED_DIM;
use crate::graph::{Graph, Var};
use crate::nn::{AttnMask, ConformerGeometry, ConformerLayer, Linear};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub causal_layers: usize,
    pub first_block_layers: usize,
    pub wide_layer_dim: usize,
    pub noncausal_layers: usize,
    /// Width of the cascaded stack; equal to `dim` unless overridden.
    pub noncausal_dim: usize,
    pub right_context_frames: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub noncausal_conv_kernel: usize,
    pub ff_mult: usize,
    pub rel_clip: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: STACKED_DIM,
            dim: 512,
            causal_layers: 12,
            first_block_layers: 3,
            wide_layer_dim: 1024,
            noncausal_layers: 5,
            noncausal_dim: 512,
            right_context_frames: 15,
            heads: 8,
            conv_kernel: 15,
            noncausal_conv_kernel: 7,
            ff_mult: 4,
            rel_clip: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.dim == 0 || self.heads == 0 || self.ff_mult == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.first_block_layers > self.causal_layers {
            return bad(format!(
                "first_block_layers {} exceeds causal_layers {}",
                self.first_block_layers, self.causal_layers
            ));
        }
        for (name, d) in [
            ("dim", self.dim),
            ("wide_layer_dim", self.wide_layer_dim),
            ("noncausal_dim", self.noncausal_dim),
        ] {
            if d % self.heads != 0 {
                return bad(format!("encoder.{name} {d} not divisible by {} heads", self.heads));
            }
        }
        for k in [self.conv_kernel, self.noncausal_conv_kernel] {
            if k % 2 == 0 {
                return bad(format!("conv kernel must be odd, got {k}"));
            }
        }
        match self.noncausal_layers {
            0 if self.right_context_frames != 0 => {
                bad("right context needs at least one non-causal layer".into())
            }
            0 => Ok(()),
            n if self.right_context_frames % n != 0 => bad(format!(
                "right context {} does not split evenly over {n} layers",
                self.right_context_frames
            )),
            _ => Ok(()),
        }
    }

    pub fn lookahead_per_layer(&self) -> usize {
        if self.noncausal_layers == 0 {
            0
        } else {
            self.right_context_frames / self.noncausal_layers
        }
    }

    fn has_wide(&self) -> bool {
        self.causal_layers > self.first_block_layers
    }

    fn geo(&self, dim: usize, kernel: usize) -> ConformerGeometry {
        ConformerGeometry {
            dim,
            heads: self.heads,
            kernel,
            ff_mult: self.ff_mult,
            rel_clip: self.rel_clip,
        }
    }

    pub fn count_causal(&self) -> usize {
        let d = self.dim;
        let mut n = Linear::count(self.input_dim, d, true);
        n += self.first_block_layers * ConformerLayer::count(self.geo(d, self.conv_kernel));
        if self.has_wide() {
            let w = self.wide_layer_dim;
            if w != 2 * d {
                n += Linear::count(2 * d, w, true);
            }
            n += ConformerLayer::count(self.geo(w, self.conv_kernel));
            n += Linear::count(w, d, true);
            let rest = self.causal_layers - self.first_block_layers - 1;
            n += rest * ConformerLayer::count(self.geo(d, self.conv_kernel));
        } else {
            n += Linear::count(2 * d, d, true);
        }
        n
    }

    pub fn count_noncausal(&self) -> usize {
        if self.noncausal_layers == 0 {
            return 0;
        }
        let (d, nd) = (self.dim, self.noncausal_dim);
        let proj = if nd != d {
            Linear::count(d, nd, true) + Linear::count(nd, d, true)
        } else {
            0
        };
        proj + self.noncausal_layers * ConformerLayer::count(self.geo(nd, self.noncausal_conv_kernel))
    }

    pub fn count(&self) -> usize {
        self.count_causal() + self.count_noncausal()
    }
}

/// Encoded sequences at the 60-ms rate.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub causal: Tensor,
    pub noncausal: Tensor,
}

/// Graph-level counterpart of [`EncoderOutputs`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub causal: Var,
    pub noncausal: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    input_proj: Linear,
    first: Vec<ConformerLayer>,
    wide_in: Option<Linear>,
    wide: Option<ConformerLayer>,
    wide_out: Linear,
    rest: Vec<ConformerLayer>,
    nc_in: Option<Linear>,
    noncausal: Vec<ConformerLayer>,
    nc_out: Option<Linear>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let p = |n: &str| format!("{prefix}.{n}");
        let input_proj = Linear::new(store, &p("input_proj"), cfg.input_dim, d, true, rng)?;
        let mut first = Vec::new();
        for i in 0..cfg.first_block_layers {
            first.push(ConformerLayer::new(store, &p(&format!("causal.{i}")), cfg.geo(d, cfg.conv_kernel), rng)?);
        }
        let (wide_in, wide, wide_out, mut rest) = if cfg.has_wide() {
            let w = cfg.wide_layer_dim;
            let wide_in = if w != 2 * d {
                Some(Linear::new(store, &p("wide_in"), 2 * d, w, true, rng)?)
            } else {
                None
            };
            let wide = ConformerLayer::new(
                store,
                &p(&format!("causal.{}", cfg.first_block_layers)),
                cfg.geo(w, cfg.conv_kernel),
                rng,
            )?;
            let wide_out = Linear::new(store, &p("wide_out"), w, d, true, rng)?;
            (wide_in, Some(wide), wide_out, Vec::new())
        } else {
            let out = Linear::new(store, &p("wide_out"), 2 * d, d, true, rng)?;
            (None, None, out, Vec::new())
        };
        for i in cfg.first_block_layers + 1..cfg.causal_layers {
            rest.push(ConformerLayer::new(store, &p(&format!("causal.{i}")), cfg.geo(d, cfg.conv_kernel), rng)?);
        }
        let nd = cfg.noncausal_dim;
        let reproject = cfg.noncausal_layers > 0 && nd != d;
        let nc_in = if reproject {
            Some(Linear::new(store, &p("nc_in"), d, nd, true, rng)?)
        } else {
            None
        };
        let mut noncausal = Vec::new();
        for i in 0..cfg.noncausal_layers {
            noncausal.push(ConformerLayer::new(
                store,
                &p(&format!("noncausal.{i}")),
                cfg.geo(nd, cfg.noncausal_conv_kernel),
                rng,
            )?);
        }
        let nc_out = if reproject {
            Some(Linear::new(store, &p("nc_out"), nd, d, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            input_proj,
            first,
            wide_in,
            wide,
            wide_out,
            rest,
            nc_in,
            noncausal,
            nc_out,
        })
    }

    /// `[T, input_dim]` at 30 ms -> `[ceil(T/2), dim]` at 60 ms. Output frame
    /// `t` reads input frames `<= 2t + 1` only.
    pub fn causal(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::shape(
                "causal_encode",
                format!("expected [T, {}], got {shape:?}", self.cfg.input_dim),
            ));
        }
        let causal = AttnMask::Lookahead(0);
        let mut h = self.input_proj.forward(g, s, x)?;
        for l in &self.first {
            h = l.forward(g, s, h, causal)?;
        }
        h = time_stack(g, h)?;
        if let Some(wide) = &self.wide {
            if let Some(wi) = &self.wide_in {
                h = wi.forward(g, s, h)?;
            }
            h = wide.forward(g, s, h, causal)?;
        }
        h = self.wide_out.forward(g, s, h)?;
        for l in &self.rest {
            h = l.forward(g, s, h, causal)?;
        }
        Ok(h)
    }

    /// Cascaded encoder over the causal sequence; output frame `t` reads
    /// causal frames `<= t + right_context_frames` only.
    pub fn cascade(&self, g: &mut Graph, s: &ParamStore, causal: Var) -> Result<Var> {
        if g.shape(causal).len() != 2 || g.shape(causal)[1] != self.cfg.dim {
            return Err(Error::shape("cascade_encode", "input width differs from encoder dim"));
        }
        if self.noncausal.is_empty() {
            return Ok(causal);
        }
        let mask = AttnMask::Lookahead(self.cfg.lookahead_per_layer());
        let mut h = causal;
        if let Some(p) = &self.nc_in {
            h = p.forward(g, s, h)?;
        }
        for l in &self.noncausal {
            h = l.forward(g, s, h, mask)?;
        }
        if let Some(p) = &self.nc_out {
            h = p.forward(g, s, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<EncoderVars> {
        let causal = self.causal(g, s, x)?;
        let noncausal = self.cascade(g, s, causal)?;
        Ok(EncoderVars { causal, noncausal })
    }

    /// Inference on a stacked feature matrix.
    pub fn encode(&self, s: &ParamStore, stacked: &Tensor) -> Result<EncoderOutputs> {
        let mut g = Graph::new();
        let x = g.input(stacked.clone());
        let v = self.forward(&mut g, s, x)?;
        Ok(EncoderOutputs {
            causal: g.value(v.causal).clone(),
            noncausal: g.value(v.noncausal).clone(),
        })
    }
}

/// Concatenate frames `2t` and `2t+1`; an odd final frame is paired with
/// itself.
pub fn time_stack(g: &mut Graph, x: Var) -> Result<Var> {
    let t_len = g.shape(x)[0];
    let out_len = t_len.div_ceil(2);
    let mut rows = Vec::with_capacity(out_len);
    for t in 0..out_len {
        let a = g.slice(x, 0, 2 * t, 1)?;
        let b = if 2 * t + 1 < t_len {
            g.slice(x, 0, 2 * t + 1, 1)?
        } else {
            a
        };
        rows.push(g.concat(&[a, b], 1)?);
    }
    g.concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_dim: 12,
            dim: 8,
            causal_layers: 3,
            first_block_layers: 1,
            wide_layer_dim: 16,
            noncausal_layers: 2,
            noncausal_dim: 8,
            right_context_frames: 4,
            heads: 2,
            conv_kernel: 3,
            noncausal_conv_kernel: 3,
            ff_mult: 2,
            rel_clip: 4,
        }
    }

    #[test]
    fn count_matches_construction() {
        for cfg in [
            tiny(),
            EncoderConfig {
                causal_layers: 1,
                first_block_layers: 1,
                noncausal_dim: 4,
                ..tiny()
            },
            EncoderConfig {
                wide_layer_dim: 12,
                noncausal_layers: 0,
                right_context_frames: 0,
                ..tiny()
            },
        ] {
            let mut s = ParamStore::new();
            Encoder::new(&mut s, "enc", &cfg, &mut SeededRng::new(0)).unwrap();
            assert_eq!(s.num_values(), cfg.count(), "{cfg:?}");
        }
    }

    #[test]
    fn validation() {
        assert!(EncoderConfig { right_context_frames: 5, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { conv_kernel: 4, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { first_block_layers: 4, ..tiny() }.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
        assert_eq!(EncoderConfig::default().lookahead_per_layer(), 3);
    }

    #[test]
    fn frame_rate_halves() {
        let cfg = tiny();
        let mut s = ParamStore::new();
        let enc = Encoder::new(&mut s, "enc", &cfg, &mut SeededRng::new(0)).unwrap();
        for (t, want) in [(8, 4), (7, 4), (1, 1)] {
            let out = enc.encode(&s, &Tensor::full(vec![t, 12], 0.1)).unwrap();
            assert_eq!(out.causal.shape(), &[want, 8]);
            assert_eq!(out.noncausal.shape(), &[want, 8]);
        }
        assert!(enc.encode(&s, &Tensor::zeros(vec![4, 11])).is_err());
    }
}
