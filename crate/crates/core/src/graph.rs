//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every executed op together with the values needed to
//! run it backwards. Nodes are appended in execution order, so the tape is
//! topologically sorted by construction and [`Graph::backward`] visits each
//! node exactly once, from the loss down to the leaves.
//!
//! Ops work on rank-2 tensors (`[rows, cols]`) unless stated otherwise; a
//! reduction yields a rank-0 scalar.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{log_sum_exp, matmul_nn, matmul_nt, matmul_tn, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        left: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    AddOuter(Var, Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    /// Scalar whose local gradient w.r.t. its single input was computed
    /// during the forward pass (used by dynamic-programming losses).
    ScalarWithGrad {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Primitive op kinds addressable by name, see [`Graph::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Conv1d,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Sigmoid,
    Tanh,
    Swish,
    Concat,
    Slice,
    Transpose,
    Embed,
    ReduceSum,
    ReduceMean,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Conv1d,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Swish,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Embed,
        OpKind::ReduceSum,
        OpKind::ReduceMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Conv1d => "conv1d",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Swish => "swish",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Embed => "embed",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::ReduceMean => "reduce_mean",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown op kind {s:?}")))
    }
}

/// Attributes for [`Graph::forward_op`]; fields irrelevant to a kind are ignored.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub axis: usize,
    pub start: usize,
    pub len: usize,
    pub left_pad: usize,
    pub ids: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug mode: every op output is checked for NaN/Inf.
    pub fn with_finite_checks() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// An input whose gradient is wanted.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// The graph leaf for a stored parameter, created on first use. Frozen
    /// parameters enter as constants and never receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push_unchecked(p.value.clone(), Op::Param, !p.frozen);
        self.params.insert(id, v);
        v
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(Error::shape(op, format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Either equal shapes, or `b` holds one row broadcast over every row of `a`.
    fn broadcast_ok(&self, a: Var, b: Var, op: &'static str) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(false);
        }
        if tb.len() == ta.cols() && tb.rows() == 1 && ta.rank() >= 1 {
            return Ok(true);
        }
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        ))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let c = tb.len();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % c]))
            .collect();
        Tensor::new(ta.shape().to_vec(), out).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok(a, b, "add")?;
        let t = self.zip_broadcast(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok(a, b, "sub")?;
        let t = self.zip_broadcast(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok(a, b, "mul")?;
        let t = self.zip_broadcast(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push("swish", t, Op::Swish(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Row-wise softmax where entries with `keep[i] == false` get exactly zero
    /// probability, independent of their input value. Every row must keep at
    /// least one entry.
    pub fn masked_softmax(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(k) = keep {
            if k.len() != x.len() {
                return Err(Error::shape("softmax", "mask size differs from input"));
            }
        }
        let c = x.cols();
        let mut out = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let kept = |j: usize| keep.is_none_or(|k| k[r * c + j]);
            let m = (0..c)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::invalid("softmax row with every entry masked"));
            }
            let mut z = 0.0;
            for j in 0..c {
                if kept(j) {
                    let e = (row[j] - m).exp();
                    out[r * c + j] = e;
                    z += e;
                }
            }
            for v in &mut out[r * c..(r + 1) * c] {
                *v /= z;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row(r);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        debug_assert_eq!(t.cols(), c);
        self.push("log_softmax", t, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance, then `* gain + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", "gain/bias size differs from width"));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.rows();
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[a, gain, bias],
        )
    }

    /// Depthwise 1-D convolution along time. `x` is `[T, C]`, `w` is `[K, C]`;
    /// output frame `t` reads input frames `t - left ..= t - left + K - 1`,
    /// zero-padded outside `[0, T)`.
    pub fn conv1d(&mut self, x: Var, w: Var, left: usize) -> Result<Var> {
        let (t_len, c) = self.dims2(x, "conv1d")?;
        let (k, c2) = self.dims2(w, "conv1d")?;
        if c != c2 {
            return Err(Error::shape("conv1d", "channel count differs"));
        }
        if left > k.saturating_sub(1) {
            return Err(Error::invalid("conv1d left padding exceeds kernel"));
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for kk in 0..k {
                let s = t as isize + kk as isize - left as isize;
                if s < 0 || s >= t_len as isize {
                    continue;
                }
                let s = s as usize;
                for ch in 0..c {
                    out[t * c + ch] += wd[kk * c + ch] * xd[s * c + ch];
                }
            }
        }
        let t = Tensor::new(vec![t_len, c], out)?;
        self.push("conv1d", t, Op::Conv1d { x, w, left }, &[x, w])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        let dims = parts
            .iter()
            .map(|&p| self.dims2(p, "concat"))
            .collect::<Result<Vec<_>>>()?;
        let out = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::shape("concat", "column counts differ"));
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * c);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::shape("concat", "row counts differ"));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![r, cols], data)?
            }
            _ => return Err(Error::invalid(format!("concat axis {axis}"))),
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice")?;
        let xd = self.value(x).data();
        let out = match axis {
            0 if start + len <= r && len > 0 => {
                Tensor::new(vec![len, c], xd[start * c..(start + len) * c].to_vec())?
            }
            1 if start + len <= c && len > 0 => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
                }
                Tensor::new(vec![r, len], data)?
            }
            _ => {
                return Err(Error::shape(
                    "slice",
                    format!("axis {axis} range {start}..{} of [{r}, {c}]", start + len),
                ))
            }
        };
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], data)?, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Gather rows of `table` (`[N, D]`) -> `[ids.len(), D]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table, "embed")?;
        if ids.is_empty() {
            return Err(Error::invalid("embed of an empty id list"));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::invalid(format!("embedding id {i} >= {n}")));
            }
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embed",
            t,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("reduce_sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("reduce_mean", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// `a` is `[T, J]`, `b` is `[U, J]`; row `t * U + u` of the result is `a[t] + b[u]`.
    pub fn add_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t_len, j) = self.dims2(a, "add_outer")?;
        let (u_len, j2) = self.dims2(b, "add_outer")?;
        if j != j2 {
            return Err(Error::shape("add_outer", "widths differ"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(t_len * u_len * j);
        for t in 0..t_len {
            for u in 0..u_len {
                data.extend(
                    ad[t * j..(t + 1) * j]
                        .iter()
                        .zip(&bd[u * j..(u + 1) * j])
                        .map(|(x, y)| x + y),
                );
            }
        }
        let out = Tensor::new(vec![t_len * u_len, j], data)?;
        self.push("add_outer", out, Op::AddOuter(a, b), &[a, b])
    }

    /// One entry per row: `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "pick")?;
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick", "index list does not match rows"));
        }
        let xd = self.value(x).data();
        let data = idx.iter().enumerate().map(|(i, &j)| xd[i * c + j]).collect();
        self.push(
            "pick",
            Tensor::vector(data),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Record a scalar function of `x` whose value and gradient were computed
    /// outside the tape.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::shape("scalar_with_grad", "gradient size differs"));
        }
        self.push(
            "scalar_with_grad",
            Tensor::scalar(value),
            Op::ScalarWithGrad { x, grad },
            &[x],
        )
    }

    /// Uniform entry point addressing primitives by [`OpKind`].
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} takes {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Conv1d => {
                need(2)?;
                if self.dims2(inputs[1], "conv1d")?.0 < 1 {
                    return Err(Error::invalid("conv1d kernel size must be >= 1"));
                }
                self.conv1d(inputs[0], inputs[1], attrs.left_pad)
            }
            OpKind::Softmax => {
                need(1)?;
                self.softmax(inputs[0])
            }
            OpKind::LogSoftmax => {
                need(1)?;
                self.log_softmax(inputs[0])
            }
            OpKind::LayerNorm => {
                need(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Sigmoid => {
                need(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Tanh => {
                need(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Swish => {
                need(1)?;
                self.swish(inputs[0])
            }
            OpKind::Concat => self.concat(inputs, attrs.axis),
            OpKind::Slice => {
                need(1)?;
                self.slice(inputs[0], attrs.axis, attrs.start, attrs.len)
            }
            OpKind::Transpose => {
                need(1)?;
                self.transpose(inputs[0])
            }
            OpKind::Embed => {
                need(1)?;
                self.embed(inputs[0], &attrs.ids)
            }
            OpKind::ReduceSum => {
                need(1)?;
                self.sum_all(inputs[0])
            }
            OpKind::ReduceMean => {
                need(1)?;
                self.mean_all(inputs[0])
            }
        }
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }

        let mut params = Vec::new();
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", id.0)));
                }
                params.push((id, v));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if want(*a) {
                    let da = matmul_nt(g, tb.data(), m, n, k);
                    acc(*a, &|s| add_into(s, &da));
                }
                if want(*b) {
                    let db = matmul_tn(ta.data(), g, m, k, n);
                    acc(*b, &|s| add_into(s, &db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|s| add_into(s, g));
                let c = val(*b).len();
                acc(*b, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % c] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let c = bd.len();
                acc(*a, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i] += gv * bd[i % c];
                    }
                });
                acc(*b, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % c] += gv * ad[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| {
                for (sv, gv) in s.iter_mut().zip(g) {
                    *sv += gv * k;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Swish(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(x[i]);
                        s[i] += g[i] * (sg + x[i] * sg * (1.0 - sg));
                    }
                })
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(*a, &|s| {
                    for r in 0..s.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            s[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &|s| {
                    for r in 0..s.len() / c {
                        let gr = &g[r * c..(r + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            s[r * c + j] += gr[j] - y[r * c + j].exp() * gsum;
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let rows = rstd.len();
                let gd = val(*gain).data();
                acc(*gain, &|s| {
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*bias, &|s| {
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j];
                        }
                    }
                });
                acc(*x, &|s| {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            s[r * c + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * c + j] * m2);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, left } => {
                let (tx, tw) = (val(*x), val(*w));
                let (t_len, c, k) = (tx.rows(), tx.cols(), tw.rows());
                let (xd, wd) = (tx.data(), tw.data());
                let taps = |f: &mut dyn FnMut(usize, usize)| {
                    for t in 0..t_len {
                        for kk in 0..k {
                            let s = t as isize + kk as isize - *left as isize;
                            if s >= 0 && (s as usize) < t_len {
                                f(t, kk);
                            }
                        }
                    }
                };
                acc(*x, &|s| {
                    taps(&mut |t, kk| {
                        let src = t + kk - left;
                        for ch in 0..c {
                            s[src * c + ch] += wd[kk * c + ch] * g[t * c + ch];
                        }
                    })
                });
                acc(*w, &|s| {
                    taps(&mut |t, kk| {
                        let src = t + kk - left;
                        for ch in 0..c {
                            s[kk * c + ch] += xd[src * c + ch] * g[t * c + ch];
                        }
                    })
                });
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let (pr, pc) = (tp.rows(), tp.cols());
                    match axis {
                        0 => acc(p, &|s| add_into(s, &g[offset * pc..(offset + pr) * pc])),
                        _ => acc(p, &|s| {
                            for i in 0..pr {
                                for j in 0..pc {
                                    s[i * pc + j] += g[i * total_cols + offset + j];
                                }
                            }
                        }),
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let c = val(*x).cols();
                let (or, oc) = (node.value.rows(), node.value.cols());
                acc(*x, &|s| match axis {
                    0 => add_into(&mut s[start * c..(start + or) * c], g),
                    _ => {
                        for i in 0..or {
                            for j in 0..oc {
                                s[i * c + start + j] += g[i * oc + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
            Op::Embed { table, ids } => {
                let d = val(*table).cols();
                acc(*table, &|s| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &|s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::AddOuter(a, b) => {
                let (t_len, j) = (val(*a).rows(), val(*a).cols());
                let u_len = val(*b).rows();
                acc(*a, &|s| {
                    for t in 0..t_len {
                        for u in 0..u_len {
                            add_into(
                                &mut s[t * j..(t + 1) * j],
                                &g[(t * u_len + u) * j..(t * u_len + u + 1) * j],
                            );
                        }
                    }
                });
                acc(*b, &|s| {
                    for t in 0..t_len {
                        for u in 0..u_len {
                            add_into(
                                &mut s[u * j..(u + 1) * j],
                                &g[(t * u_len + u) * j..(t * u_len + u + 1) * j],
                            );
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let c = val(*x).cols();
                acc(*x, &|s| {
                    for (r, &j) in idx.iter().enumerate() {
                        s[r * c + j] += g[r];
                    }
                });
            }
            Op::ScalarWithGrad { x, grad } => acc(*x, &|s| {
                for (sv, gv) in s.iter_mut().zip(grad) {
                    *sv += g[0] * gv;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the leaf was not reached.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("leaf shape"))
    }

    /// Parameters that received a gradient, in id order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|(id, _)| *id)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_deref())
    }

    /// Dense map over the trainable parameters of `store`; parameters the
    /// loss does not depend on map to zero.
    pub fn into_map(self, store: &ParamStore) -> GradMap {
        let mut map = GradMap::zeros(store);
        for (id, v) in &self.params {
            if let (Some(slot), Some(g)) = (map.grads[id.0].as_mut(), &self.grads[v.0]) {
                add_into(slot, g);
            }
        }
        map
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`]. Frozen
/// parameters have no entry at all.
#[derive(Clone, Debug)]
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, p)| (!p.frozen).then(|| vec![0.0; p.value.len()]))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    /// Number of parameters with an entry.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &GradMap) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                add_into(a, b);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Vec<f64>)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    /// Sum a batch of maps in slice order, so the result does not depend on
    /// how the per-item maps were scheduled.
    pub fn sum_ordered(store: &ParamStore, parts: &[GradMap]) -> GradMap {
        let mut total = GradMap::zeros(store);
        for p in parts {
            total.add_assign(p);
        }
        total
    }
}

/// Boolean attention mask, `keep[i * cols + j]` for query `i` and key `j`.
pub fn band_mask(rows: usize, cols: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            m.push(keep(i, j));
        }
    }
    m
}
