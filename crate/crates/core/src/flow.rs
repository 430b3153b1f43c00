//! Conditional normalizing flow built from GLOW-style blocks.
//!
//! One block, read in the normalizing direction (data → base), is
//! actnorm → invertible linear (fixed permutation times learned LU factors)
//! → affine coupling whose conditioner sees the untouched half and the
//! conditioning vector. The coupling log-scale is soft-clamped to
//! `±MAX_LOG_SCALE` through a scaled tanh. Successive blocks swap which half
//! is transformed.
//!
//! `forward` is the generative direction z → x′ and `inverse` the
//! normalizing one. Training differentiates `normalize`; the generative pass
//! applies the cached inverse of each linear layer as a constant.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{Bound, ParamId, ParamStore};

pub const MAX_LOG_SCALE: f64 = 5.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSpec {
    pub dim: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowInit {
    /// Identity permutations and zero conditioner outputs: the exact identity map.
    Identity,
    /// Random fixed permutations, zero conditioner outputs.
    Permuted,
}

#[derive(Clone, Debug)]
struct Block {
    log_scale: ParamId,
    shift: ParamId,
    perm: ParamId,
    lower: ParamId,
    upper: ParamId,
    log_diag: ParamId,
    sign: ParamId,
    conditioner: Mlp,
    flip: bool,
}

#[derive(Clone, Debug)]
struct Consts {
    eye: Tensor,
    mask_lower: Tensor,
    mask_upper: Tensor,
    ones_col: Tensor,
}

#[derive(Clone, Debug)]
pub struct Flow {
    spec: FlowSpec,
    blocks: Vec<Block>,
    consts: Consts,
}

fn non_finite_in(block: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteBlock { block },
        other => other,
    }
}

impl Flow {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: FlowSpec,
        init: FlowInit,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.dim < 2 {
            return Err(Error::Config(format!("flow dimension must be ≥ 2, got {}", spec.dim)));
        }
        if spec.blocks == 0 {
            return Err(Error::Config("flow needs at least one block".into()));
        }
        let d = spec.dim;
        let mut blocks = Vec::with_capacity(spec.blocks);
        for i in 0..spec.blocks {
            let name = format!("{prefix}.b{i}");
            let flip = i % 2 == 1;
            let (keep, change) = halves(d, flip);
            let mut order: Vec<usize> = (0..d).collect();
            if init == FlowInit::Permuted {
                order.shuffle(rng);
            }
            let log_scale = store.add(format!("{name}.an.log_scale"), Tensor::zeros(&[d]));
            let shift = store.add(format!("{name}.an.shift"), Tensor::zeros(&[d]));
            let perm = store.add_buffer(
                format!("{name}.lu.perm"),
                Tensor::vector(order.iter().map(|&v| v as f64).collect()),
            );
            let lower = store.add(format!("{name}.lu.lower"), Tensor::zeros(&[d, d]));
            let upper = store.add(format!("{name}.lu.upper"), Tensor::zeros(&[d, d]));
            let log_diag = store.add(format!("{name}.lu.log_diag"), Tensor::zeros(&[d]));
            let sign = store.add_buffer(format!("{name}.lu.sign"), Tensor::ones(&[d]));
            let conditioner = Mlp::new(
                store,
                &format!("{name}.cp"),
                &[keep.1 + spec.cond_dim, spec.hidden, spec.hidden, 2 * change.1],
                spec.activation,
                true,
                rng,
            );
            blocks.push(Block {
                log_scale,
                shift,
                perm,
                lower,
                upper,
                log_diag,
                sign,
                conditioner,
                flip,
            });
        }
        let mut lower = vec![0.0; d * d];
        let mut upper = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    lower[i * d + j] = 1.0;
                } else if j > i {
                    upper[i * d + j] = 1.0;
                }
            }
        }
        let consts = Consts {
            eye: Tensor::eye(d),
            mask_lower: Tensor::from_parts(vec![d, d], lower),
            mask_upper: Tensor::from_parts(vec![d, d], upper),
            ones_col: Tensor::ones(&[d, 1]),
        };
        Ok(Self {
            spec,
            blocks,
            consts,
        })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_inputs(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<usize> {
        let (b, d) = x.dims2().ok_or_else(|| Error::Shape {
            op: "flow",
            lhs: vec![0, self.spec.dim],
            rhs: x.shape().to_vec(),
        })?;
        if d != self.spec.dim {
            return Err(Error::Dimension {
                expected: self.spec.dim,
                got: d,
            });
        }
        match (cond, self.spec.cond_dim) {
            (None, 0) => Ok(b),
            (Some(c), cd) if c.dims2() == Some((b, cd)) => Ok(b),
            (c, cd) => Err(Error::Shape {
                op: "flow condition",
                lhs: vec![b, cd],
                rhs: c.map(|t| t.shape().to_vec()).unwrap_or_default(),
            }),
        }
    }

    /// Linear-layer matrix `A = P·L·U` built on the tape, acting on row vectors.
    fn linear_matrix(&self, tape: &mut Tape, p: &Bound, store_perm: &Tensor, b: &Block) -> Result<Var> {
        let d = self.spec.dim;
        let c = &self.consts;
        let eye = tape.constant(c.eye.clone());
        let ml = tape.constant(c.mask_lower.clone());
        let mu = tape.constant(c.mask_upper.clone());
        let ones = tape.constant(c.ones_col.clone());
        let l = tape.mul(p[b.lower], ml)?;
        let l = tape.add(l, eye)?;
        let s = tape.exp(p[b.log_diag])?;
        let s = tape.mul(s, p[b.sign])?;
        let s = tape.reshape(s, &[1, d])?;
        let rows = tape.matmul(ones, s)?;
        let diag = tape.mul(rows, eye)?;
        let u = tape.mul(p[b.upper], mu)?;
        let u = tape.add(u, diag)?;
        let perm = tape.constant(perm_matrix(store_perm));
        let pl = tape.matmul(perm, l)?;
        tape.matmul(pl, u)
    }

    fn coupling_params(
        &self,
        tape: &mut Tape,
        p: &Bound,
        b: &Block,
        keep: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (_, change) = halves(self.spec.dim, b.flip);
        let input = match cond {
            Some(c) => tape.concat(&[keep, c], 1)?,
            None => keep,
        };
        let out = b.conditioner.apply(tape, p, input)?;
        let raw = tape.slice(out, 1, 0, change.1)?;
        let t = tape.slice(out, 1, change.1, change.1)?;
        let ls = tape.scale(raw, 1.0 / MAX_LOG_SCALE)?;
        let ls = tape.tanh(ls)?;
        let ls = tape.scale(ls, MAX_LOG_SCALE)?;
        Ok((ls, t))
    }

    fn split(&self, tape: &mut Tape, h: Var, flip: bool) -> Result<(Var, Var)> {
        let (keep, change) = halves(self.spec.dim, flip);
        Ok((
            tape.slice(h, 1, keep.0, keep.1)?,
            tape.slice(h, 1, change.0, change.1)?,
        ))
    }

    fn join(&self, tape: &mut Tape, keep: Var, change: Var, flip: bool) -> Result<Var> {
        if flip {
            tape.concat(&[change, keep], 1)
        } else {
            tape.concat(&[keep, change], 1)
        }
    }

    /// Normalizing pass of one block on the tape. Adds the block's per-row
    /// log-determinant to `logdet`.
    fn normalize_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        i: usize,
        h: Var,
        cond: Option<Var>,
        logdet: Var,
    ) -> Result<(Var, Var)> {
        let b = &self.blocks[i];
        let s = tape.exp(p[b.log_scale])?;
        let h = tape.mul(h, s)?;
        let h = tape.add(h, p[b.shift])?;
        let an_ld = tape.sum(p[b.log_scale])?;

        let a = self.linear_matrix(tape, p, store.get(b.perm), b)?;
        let h = tape.matmul(h, a)?;
        let lu_ld = tape.sum(p[b.log_diag])?;

        let (keep, change) = self.split(tape, h, b.flip)?;
        let (ls, t) = self.coupling_params(tape, p, b, keep, cond)?;
        let e = tape.exp(ls)?;
        let change = tape.mul(change, e)?;
        let change = tape.add(change, t)?;
        let h = self.join(tape, keep, change, b.flip)?;
        let cp_ld = tape.sum_rows(ls)?;

        let logdet = tape.add(logdet, an_ld)?;
        let logdet = tape.add(logdet, lu_ld)?;
        let logdet = tape.add(logdet, cp_ld)?;
        Ok((h, logdet))
    }

    /// Generative pass of one block with parameters treated as constants.
    fn generate_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        i: usize,
        h: Var,
        cond: Option<Var>,
        logdet: Var,
    ) -> Result<(Var, Var)> {
        let b = &self.blocks[i];
        let (keep, change) = self.split(tape, h, b.flip)?;
        let (ls, t) = self.coupling_params(tape, p, b, keep, cond)?;
        let change = tape.sub(change, t)?;
        let neg = tape.scale(ls, -1.0)?;
        let e = tape.exp(neg)?;
        let change = tape.mul(change, e)?;
        let h = self.join(tape, keep, change, b.flip)?;
        let cp_ld = tape.sum_rows(neg)?;

        let inv = tape.constant(self.linear_inverse(store, b));
        let h = tape.matmul(h, inv)?;
        let lu_ld = -store.get(b.log_diag).data().iter().sum::<f64>();

        let ls = store.get(b.log_scale);
        let shift = tape.constant(store.get(b.shift).clone());
        let inv_scale = tape.constant(ls.map(|v| (-v).exp()));
        let h = tape.sub(h, shift)?;
        let h = tape.mul(h, inv_scale)?;
        let an_ld = -ls.data().iter().sum::<f64>();

        let logdet = tape.add(logdet, cp_ld)?;
        let logdet = tape.offset(logdet, lu_ld + an_ld)?;
        Ok((h, logdet))
    }

    /// `A⁻¹ = U⁻¹ L⁻¹ Pᵀ` from the stored factors.
    fn linear_inverse(&self, store: &ParamStore, b: &Block) -> Tensor {
        let d = self.spec.dim;
        let lower = store.get(b.lower).data();
        let upper = store.get(b.upper).data();
        let diag: Vec<f64> = store
            .get(b.log_diag)
            .data()
            .iter()
            .zip(store.get(b.sign).data())
            .map(|(l, s)| s * l.exp())
            .collect();
        let mut l = vec![0.0; d * d];
        let mut u = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    l[i * d + j] = lower[i * d + j];
                } else if j > i {
                    u[i * d + j] = upper[i * d + j];
                }
            }
            l[i * d + i] = 1.0;
            u[i * d + i] = diag[i];
        }
        let linv = invert_lower_unit(&l, d);
        let uinv = invert_upper(&u, d);
        let mut ul = vec![0.0; d * d];
        crate::autodiff::gemm(d, d, d, &uinv, &linv, &mut ul);
        // Right-multiplying by Pᵀ permutes columns.
        let perm = perm_matrix(store.get(b.perm));
        let pd = perm.data();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| ul[i * d + k] * pd[j * d + k]).sum();
            }
        }
        Tensor::from_parts(vec![d, d], out)
    }

    /// Differentiable normalizing pass x′ → z. Returns `z` and the per-row
    /// log-determinant `log|det ∂z/∂x′|`.
    pub fn normalize(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.normalize_range(tape, p, store, x, cond, 0..self.blocks.len())
    }

    fn normalize_range(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        x: Var,
        cond: Option<Var>,
        range: std::ops::Range<usize>,
    ) -> Result<(Var, Var)> {
        let rows = tape.shape(x)[0];
        let mut logdet = tape.constant(Tensor::zeros(&[rows]));
        let mut h = x;
        for i in range {
            (h, logdet) = self
                .normalize_block(tape, p, store, i, h, cond, logdet)
                .map_err(non_finite_in(i))?;
        }
        Ok((h, logdet))
    }

    fn generate_range(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        z: Var,
        cond: Option<Var>,
        range: std::ops::Range<usize>,
    ) -> Result<(Var, Var)> {
        let rows = tape.shape(z)[0];
        let mut logdet = tape.constant(Tensor::zeros(&[rows]));
        let mut h = z;
        for i in range.rev() {
            (h, logdet) = self
                .generate_block(tape, p, store, i, h, cond, logdet)
                .map_err(non_finite_in(i))?;
        }
        Ok((h, logdet))
    }

    /// Per-row `log N(z; 0, I)` on the tape.
    pub fn base_log_prob(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let sq = tape.mul(z, z)?;
        let s = tape.sum_rows(sq)?;
        let s = tape.scale(s, -0.5)?;
        tape.offset(s, -0.5 * self.spec.dim as f64 * LN_2PI)
    }

    /// Differentiable per-row `log p(x′ | cond)`.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let (z, ld) = self.normalize(tape, p, store, x, cond)?;
        let base = self.base_log_prob(tape, z)?;
        tape.add(base, ld)
    }

    fn eval(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cond: Option<&Tensor>,
        generative: bool,
        range: std::ops::Range<usize>,
    ) -> Result<(Tensor, Vec<f64>)> {
        self.check_inputs(x, cond)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        let (out, ld) = if generative {
            self.generate_range(&mut tape, &p, store, xv, cv, range)?
        } else {
            self.normalize_range(&mut tape, &p, store, xv, cv, range)?
        };
        Ok((tape.value(out).clone(), tape.value(ld).to_vec()))
    }

    /// Generative direction: rows of `z` to rows of x′ with `log|det ∂x′/∂z|`.
    pub fn forward(
        &self,
        store: &ParamStore,
        z: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<f64>)> {
        self.eval(store, z, cond, true, 0..self.blocks.len())
    }

    /// Normalizing direction: rows of x′ to rows of `z` with `log|det ∂z/∂x′|`.
    pub fn inverse(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<f64>)> {
        self.eval(store, x, cond, false, 0..self.blocks.len())
    }

    /// Generative pass through block `i` alone.
    pub fn forward_block(
        &self,
        store: &ParamStore,
        i: usize,
        z: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<f64>)> {
        self.eval(store, z, cond, true, i..i + 1)
    }

    /// Normalizing pass through block `i` alone.
    pub fn inverse_block(
        &self,
        store: &ParamStore,
        i: usize,
        x: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<f64>)> {
        self.eval(store, x, cond, false, i..i + 1)
    }

    pub fn log_prob(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<Vec<f64>> {
        let (z, ld) = self.inverse(store, x, cond)?;
        let d = self.spec.dim as f64;
        Ok(z.data()
            .chunks(self.spec.dim)
            .zip(ld)
            .map(|(row, l)| -0.5 * row.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * LN_2PI + l)
            .collect())
    }

    /// Draw `k` samples sharing the conditioning row `cond`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        cond: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::invalid("sample", "sample count must be at least 1"));
        }
        if cond.len() != self.spec.cond_dim {
            return Err(Error::Dimension {
                expected: self.spec.cond_dim,
                got: cond.len(),
            });
        }
        let z = standard_normal(rng, k, self.spec.dim);
        let c = (self.spec.cond_dim > 0).then(|| repeat_row(cond, k));
        Ok(self.forward(store, &z, c.as_ref())?.0)
    }
}

/// Index ranges `(start, len)` of the untouched and transformed halves.
fn halves(d: usize, flip: bool) -> ((usize, usize), (usize, usize)) {
    let first = (0, d / 2);
    let second = (d / 2, d - d / 2);
    if flip {
        (second, first)
    } else {
        (first, second)
    }
}

fn perm_matrix(order: &Tensor) -> Tensor {
    let d = order.numel();
    let mut m = vec![0.0; d * d];
    for (i, &j) in order.data().iter().enumerate() {
        m[i * d + j as usize] = 1.0;
    }
    Tensor::from_parts(vec![d, d], m)
}

fn invert_lower_unit(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    for col in 0..d {
        for i in 0..d {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                v -= l[i * d + k] * inv[k * d + col];
            }
            inv[i * d + col] = v;
        }
    }
    inv
}

fn invert_upper(u: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    for col in 0..d {
        for i in (0..d).rev() {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in i + 1..d {
                v -= u[i * d + k] * inv[k * d + col];
            }
            inv[i * d + col] = v / u[i * d + i];
        }
    }
    inv
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

pub fn repeat_row(row: &[f64], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * k);
    for _ in 0..k {
        data.extend_from_slice(row);
    }
    Tensor::from_parts(vec![k, row.len()], data)
}
