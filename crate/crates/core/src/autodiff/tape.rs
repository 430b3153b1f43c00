//! Wengert tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node. Nodes whose inputs
//! carry no gradient are recorded as constants, so inference graphs hold no
//! back-links. `backward` walks the node list once in reverse.

use std::collections::BTreeMap;

use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(x, w, b) => vec![*x, *w, *b],
            Op::Conv2d { x, k, bias, .. } => {
                let mut v = vec![*x, *k];
                v.extend(bias.iter().copied());
                v
            }
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Clamp(a, _, _)
            | Op::Reshape(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_node.iter().map(|(k, v)| (Var(*k), v))
    }
}

/// Operation record for one forward pass. Confined to the thread that builds it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn bcast_of(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(Bcast::Scalar);
    }
    if let [_, n] = a {
        if bn == *n && (b.len() == 1 || (b.len() == 2 && b[0] == 1)) {
            return Ok(Bcast::Row);
        }
    }
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

#[inline]
fn bidx(bc: Bcast, i: usize, n: usize) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % n,
    }
}

/// Reduce a gradient shaped like `a` onto an operand broadcast as `bc`.
fn reduce_to(bc: Bcast, g: &[f64], cols: usize, out: &mut [f64]) {
    match bc {
        Bcast::Same => {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
        Bcast::Scalar => out[0] += g.iter().sum::<f64>(),
        Bcast::Row => {
            for row in g.chunks(cols) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Constant, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Constant };
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = bcast_of(name, ta.shape(), tb.shape())?;
        let n = *ta.shape().last().unwrap();
        let (da, db) = (ta.data(), tb.data());
        let out = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[bidx(bc, i, n)]))
            .collect();
        Ok((Tensor::from_parts(ta.shape().to_vec(), out), bc))
    }

    /// Elementwise sum. `b` may also be a scalar or a row broadcast over a matrix `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a.0, b.0, bc))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a.0, b.0, bc))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a.0, b.0, bc))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.nodes[a.0].value.map(|x| x * c);
        self.push(t, Op::Scale(a.0, c))
    }

    /// Add a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.nodes[a.0].value.map(|x| x + c);
        self.push(t, Op::Offset(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0))
    }

    /// `x · w + b` with `x: m×k`, `w: k×n`, `b: n`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let ((m, k), (k2, n)) = match (tx.dims2(), tw.dims2()) {
            (Some(a), Some(c)) if a.1 == c.0 => (a, c),
            _ => {
                return Err(Error::Shape {
                    op: "affine",
                    lhs: tx.shape().to_vec(),
                    rhs: tw.shape().to_vec(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        if tb.numel() != n {
            return Err(Error::Shape {
                op: "affine",
                lhs: tw.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm_strided(
            m,
            k,
            n,
            tx.data(),
            (k as isize, 1),
            tw.data(),
            (n as isize, 1),
            &mut out,
            1.0,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::Affine(x.0, w.0, b.0))
    }

    /// 2-D convolution (cross-correlation) over `x: N×C×H×W` with
    /// `k: O×C×KH×KW`, optional per-channel `bias: O`, stride 1 or 2 and
    /// symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: tx.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        };
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid("conv2d", format!("unsupported stride {stride}")));
        }
        let (&[n, c, h, w], &[o, c2, kh, kw]) = (tx.shape(), tk.shape()) else {
            return Err(shape_err());
        };
        if c != c2 {
            return Err(shape_err());
        }
        let (Some(ho), Some(wo)) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad))
        else {
            return Err(shape_err());
        };
        if let Some(b) = bias {
            let tb = &self.nodes[b.0].value;
            if tb.numel() != o {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: tk.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        let bias_vals = bias.map(|b| self.nodes[b.0].value.data().to_vec());
        let (dx, dk) = (tx.data(), tk.data());
        let mut out = vec![0.0; n * o * ho * wo];
        for img in 0..n {
            for oc in 0..o {
                let base = bias_vals.as_ref().map_or(0.0, |b| b[oc]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = base;
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += dx[((img * c + ic) * h + iy as usize) * w + ix as usize]
                                        * dk[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((img * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, o, ho, wo], out),
            Op::Conv2d {
                x: x.0,
                k: k.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Row sums of a matrix `m×n`, shape `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let Some((_, n)) = t.dims2() else {
            return Err(Error::invalid(
                "sum_rows",
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        };
        let out: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        self.push(Tensor::from_parts(vec![out.len()], out), Op::SumRows(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.map(f64::exp);
        self.push(t, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let t = t.map(f64::ln);
        self.push(t, Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.map(f64::tanh);
        self.push(t, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.map(softplus);
        self.push(t, Op::Softplus(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.map(sigmoid);
        self.push(t, Op::Sigmoid(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let t = self.nodes[a.0]
            .value
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a.0, slope))
    }

    /// Hard clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a.0, lo, hi))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !conforms {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * s[axis] + start) * inner;
            out.extend_from_slice(&t.data()[off..off + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.reshaped(shape)?;
        self.push(t, Op::Reshape(a.0))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                out.by_node
                    .insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.data();
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.acc(grads, a) {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                let cols = *node.value.shape().last().unwrap();
                if let Some(gb) = self.acc(grads, b) {
                    if sign > 0.0 {
                        reduce_to(bc, g, cols, gb);
                    } else {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        reduce_to(bc, &neg, cols, gb);
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let cols = *node.value.shape().last().unwrap();
                let (da, db) = (val(a), val(b));
                if let Some(ga) = self.acc(grads, a) {
                    for (i, (o, v)) in ga.iter_mut().zip(g).enumerate() {
                        *o += v * db[bidx(bc, i, cols)];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    let prod: Vec<f64> = g.iter().zip(da).map(|(v, x)| v * x).collect();
                    reduce_to(bc, &prod, cols, gb);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v * c;
                    }
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a].value.dims2().unwrap();
                let n = self.nodes[b].value.dims2().unwrap().1;
                self.matmul_backward(a, b, m, k, n, g, grads);
            }
            Op::Affine(x, w, b) => {
                let (m, k) = self.nodes[x].value.dims2().unwrap();
                let n = self.nodes[w].value.dims2().unwrap().1;
                self.matmul_backward(x, w, m, k, n, g, grads);
                if let Some(gb) = self.acc(grads, b) {
                    reduce_to(Bcast::Row, g, n, gb);
                }
            }
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad,
            } => self.conv_backward(id, x, k, bias, stride, pad, g, grads),
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a].value.numel() as f64;
                if let Some(ga) = self.acc(grads, a) {
                    for o in ga.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::SumRows(a) => {
                let n = self.nodes[a].value.dims2().unwrap().1;
                if let Some(ga) = self.acc(grads, a) {
                    for (row, v) in ga.chunks_mut(n).zip(g) {
                        for o in row {
                            *o += v;
                        }
                    }
                }
            }
            Op::Exp(a) => self.unary_back(a, g, node.value.data(), grads, |_, y| y),
            Op::Log(a) => self.unary_back(a, g, node.value.data(), grads, |x, _| 1.0 / x),
            Op::Tanh(a) => self.unary_back(a, g, node.value.data(), grads, |_, y| 1.0 - y * y),
            Op::Softplus(a) => self.unary_back(a, g, node.value.data(), grads, |x, _| sigmoid(x)),
            Op::Sigmoid(a) => {
                self.unary_back(a, g, node.value.data(), grads, |_, y| y * (1.0 - y))
            }
            Op::LeakyRelu(a, s) => self.unary_back(a, g, node.value.data(), grads, |x, _| {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }),
            Op::Clamp(a, lo, hi) => self.unary_back(a, g, node.value.data(), grads, |x, _| {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }),
            Op::Concat { ref inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.nodes[inp].value.shape()[axis];
                    if let Some(gi) = self.acc(grads, inp) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (d, s) in gi[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.nodes[input].value.shape().to_vec();
                let len = node.value.shape()[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(gi) = self.acc(grads, input) {
                    for o in 0..outer {
                        let dst = (o * shape[axis] + start) * inner;
                        let src = o * len * inner;
                        for (d, s) in gi[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        a: usize,
        g: &[f64],
        y: &[f64],
        grads: &mut [Option<Vec<f64>>],
        df: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.nodes[a].value.data();
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..ga.len() {
                ga[i] += g[i] * df(x[i], y[i]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        // dA = G · Bᵀ, with Bᵀ read through strides.
        if let Some(ga) = self.acc(grads, a) {
            gemm_strided(m, n, k, g, (n as isize, 1), db, (1, n as isize), ga, 1.0);
        }
        // dB = Aᵀ · G
        if let Some(gb) = self.acc(grads, b) {
            gemm_strided(k, m, n, da, (1, k as isize), g, (n as isize, 1), gb, 1.0);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        id: usize,
        x: usize,
        k: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tx, tk) = (&self.nodes[x].value, &self.nodes[k].value);
        let (&[n, c, h, w], &[o, _, kh, kw]) = (tx.shape(), tk.shape()) else {
            unreachable!("conv2d shapes validated at record time")
        };
        let &[_, _, ho, wo] = self.nodes[id].value.shape() else {
            unreachable!()
        };
        let (dx, dk) = (tx.data(), tk.data());
        let want_x = self.nodes[x].needs_grad;
        let want_k = self.nodes[k].needs_grad;
        let mut gx = vec![0.0; if want_x { dx.len() } else { 0 }];
        let mut gk = vec![0.0; if want_k { dk.len() } else { 0 }];
        for img in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = g[((img * o + oc) * ho + oy) * wo + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((img * c + ic) * h + iy as usize) * w + ix as usize;
                                    let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                    if want_x {
                                        gx[xi] += go * dk[ki];
                                    }
                                    if want_k {
                                        gk[ki] += go * dx[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(acc) = self.acc(grads, x) {
            for (d, s) in acc.iter_mut().zip(&gx) {
                *d += s;
            }
        }
        if let Some(acc) = self.acc(grads, k) {
            for (d, s) in acc.iter_mut().zip(&gk) {
                *d += s;
            }
        }
        if let Some(b) = bias {
            if let Some(acc) = self.acc(grads, b) {
                let plane = ho * wo;
                for img in 0..n {
                    for oc in 0..o {
                        let off = (img * o + oc) * plane;
                        acc[oc] += g[off..off + plane].iter().sum::<f64>();
                    }
                }
            }
        }
    }
}
