//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its output value; node ids are assigned in
//! execution order, so the tape is already topologically sorted and the
//! backward sweep is a single reverse pass. `backward` consumes the tape.

use std::collections::HashMap;

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv2d,
    Relu,
    Add,
    Mul,
    Scale,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    XLogX,
    Sum,
    Mean,
    LayerNorm,
    BatchNormTrain,
    BatchNormEval,
    Reshape,
    Permute,
    Concat,
    AvgPoolGlobal,
    AvgPool2,
    GatherRows,
}

#[derive(Clone, Debug)]
enum Saved<T> {
    None,
    MatMul {
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
    },
    Conv(ConvGeom),
    Scale(T),
    /// `(outer, axis_len, inner)` decomposition of the reduced/normalized axis.
    Axis(usize, usize, usize),
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        width: usize,
    },
    BnEval {
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Permute(Vec<usize>),
    Concat {
        axis_sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Gather(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct TapeNode<T> {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub value: Tensor<T>,
    saved: Saved<T>,
}

impl<T> TapeNode<T> {
    pub fn requires_grad(&self) -> bool {
        self.value.requires_grad
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<TapeNode<T>>,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(&var).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.remove(&var)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<Var>, shape: Vec<usize>, data: Vec<T>, saved: Saved<T>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        let saved = if requires_grad { saved } else { Saved::None };
        self.nodes.push(TapeNode {
            kind,
            inputs,
            value,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients flow to it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(TapeNode {
            kind: OpKind::Leaf,
            inputs: Vec::new(),
            value,
            saved: Saved::None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes.
    ///
    /// `b` may be rank 2 (shared across all leading axes of `a`) or have the
    /// same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || dim_err("matmul", format!("{:?} x {:?}", sa, sb));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(bad());
        }
        let m = sb[sb.len() - 1];
        let (batch, n) = if sb.len() == 2 {
            (1, numel(&sa[..sa.len() - 1]))
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(bad());
            }
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2])
        };
        let mut out = vec![T::zero(); batch * n * m];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                kernels::gemm_nn(
                    &av[bi * n * k..(bi + 1) * n * k],
                    &bv[bi * k * m..(bi + 1) * k * m],
                    &mut out[bi * n * m..(bi + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(m);
        Ok(self.push(OpKind::MatMul, vec![a, b], shape, out, Saved::MatMul { batch, n, k, m }))
    }

    /// 2-D convolution on NHWC input `[B,H,W,Cin]` with weight `[kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(dim_err(
                "conv2d",
                format!("input {:?}, weight {:?}, stride {}", sx, sw, stride),
            ));
        }
        if sx[1] + 2 * padding < sw[0] || sx[2] + 2 * padding < sw[1] {
            return Err(dim_err(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", sw, sx),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            in_channels: sx[3],
            kernel_h: sw[0],
            kernel_w: sw[1],
            stride,
            padding,
        };
        let cout = sw[3];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * cout];
        kernels::gemm_nn(
            &cols,
            self.value(w).data(),
            &mut out,
            geom.rows(),
            geom.patch_len(),
            cout,
        );
        let shape = vec![geom.batch, geom.out_height(), geom.out_width(), cout];
        Ok(self.push(OpKind::Conv2d, vec![x, w], shape, out, Saved::Conv(geom)))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(OpKind::Relu, vec![x], shape, out, Saved::None)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(
                op,
                format!("{:?} with {:?} (rhs must equal a trailing suffix of lhs)", sa, sb),
            ));
        }
        Ok(())
    }

    /// `a + b`, where `b`'s shape is a trailing suffix of `a`'s (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let bv = self.value(b).data();
        let len = bv.len();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % len])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(OpKind::Add, vec![a, b], shape, out, Saved::None))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let bv = self.value(b).data();
        let len = bv.len();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * bv[i % len])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(OpKind::Mul, vec![a, b], shape, out, Saved::None))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(OpKind::Scale, vec![x], shape, out, Saved::Scale(c))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(bad) = xv.iter().find(|&&v| !(v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("nonpositive input {}", bad),
            });
        }
        let out = xv.iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(OpKind::Log, vec![x], shape, out, Saved::None))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(OpKind::Exp, vec![x], shape, out, Saved::None)
    }

    /// `x·ln x` with `0·ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(bad) = xv.iter().find(|&&v| v < T::zero() || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "xlogx",
                detail: format!("negative input {}", bad),
            });
        }
        let out = xv
            .iter()
            .map(|&v| if v == T::zero() { T::zero() } else { v * v.ln() })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(OpKind::XLogX, vec![x], shape, out, Saved::None))
    }

    // ---------------------------------------------------------------- softmax family

    fn axis_check(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() || s[axis] == 0 {
            return Err(dim_err(op, format!("axis {} of shape {:?}", axis, s)));
        }
        Ok(split_axis(s, axis))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_check("softmax", x, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(OpKind::Softmax, vec![x], shape, out, Saved::Axis(outer, len, inner)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_check("log_softmax", x, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let total: T = (0..len).map(|j| (xv[at(j)] - mx).exp()).sum();
                let lse = total.ln();
                for j in 0..len {
                    out[at(j)] = xv[at(j)] - mx - lse;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(OpKind::LogSoftmax, vec![x], shape, out, Saved::Axis(outer, len, inner)))
    }

    // ---------------------------------------------------------------- reductions

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let op = if mean { "mean" } else { "sum" };
        let (outer, len, inner) = self.axis_check(op, x, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        if mean {
            let n = T::from_usize(len);
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let kind = if mean { OpKind::Mean } else { OpKind::Sum };
        Ok(self.push(kind, vec![x], shape, out, Saved::Axis(outer, len, inner)))
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Averages out `axis` (the axis is removed).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    // ---------------------------------------------------------------- normalization

    /// Layer norm over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| dim_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    s,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = numel(&s) / width.max(1);
        let eps = T::from_f64(eps);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let wn = T::from_usize(width);
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mu = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / wn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..width {
                let h = (row[j] - mu) * inv;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            OpKind::LayerNorm,
            vec![x, gamma, beta],
            s,
            out,
            Saved::Norm { xhat, inv_std, width },
        ))
    }

    /// Training-mode batch norm: statistics over every axis but the last.
    ///
    /// Returns the output together with the batch mean and the unbiased batch
    /// variance, which the caller folds into its running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        let ch = *s.last().ok_or_else(|| dim_err("batch_norm", "scalar input"))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(dim_err(
                "batch_norm",
                format!("input {:?}, gamma {:?}", s, self.shape(gamma)),
            ));
        }
        let rows = numel(&s) / ch.max(1);
        if rows < 2 {
            return Err(dim_err(
                "batch_norm",
                format!("training mode needs at least 2 rows, got shape {:?}", s),
            ));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rn = T::from_usize(rows);
        let mut mean = vec![T::zero(); ch];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(&xv[r * ch..(r + 1) * ch]) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / rn);
        let mut var = vec![T::zero(); ch];
        for r in 0..rows {
            for c in 0..ch {
                let d = xv[r * ch + c] - mean[c];
                var[c] = var[c] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / rn);
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            for c in 0..ch {
                let h = (xv[r * ch + c] - mean[c]) * inv_std[c];
                xhat[r * ch + c] = h;
                out[r * ch + c] = h * g[c] + b[c];
            }
        }
        let unbiased: Vec<T> = var.iter().map(|&v| v * rn / (rn - T::one())).collect();
        let var_out = self.push(
            OpKind::BatchNormTrain,
            vec![x, gamma, beta],
            s,
            out,
            Saved::Norm {
                xhat,
                inv_std,
                width: ch,
            },
        );
        Ok((var_out, mean, unbiased))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ch = *s.last().ok_or_else(|| dim_err("batch_norm", "scalar input"))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || running_mean.len() != ch || running_var.len() != ch
        {
            return Err(dim_err(
                "batch_norm",
                format!("input {:?}, gamma {:?}", s, self.shape(gamma)),
            ));
        }
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, &v) in xv.iter().enumerate() {
            let c = i % ch;
            let h = (v - running_mean[c]) * inv_std[c];
            xhat[i] = h;
            out[i] = h * g[c] + b[c];
        }
        Ok(self.push(
            OpKind::BatchNormEval,
            vec![x, gamma, beta],
            s,
            out,
            Saved::BnEval { xhat, inv_std },
        ))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(dim_err("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(OpKind::Reshape, vec![x], shape.to_vec(), data, Saved::None))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err("transpose", format!("permutation {:?} of shape {:?}", perm, s)));
        }
        let out = kernels::permute(self.value(x).data(), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(OpKind::Permute, vec![x], shape, out, Saved::Permute(perm.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(dim_err(
                "transpose",
                format!("axes ({}, {}) of shape {:?}", a, b, self.shape(x)),
            ));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(dim_err("concat", format!("axis {} of shape {:?}", axis, s0)));
        }
        let mut axis_sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(dim_err("concat", format!("{:?} vs {:?} along axis {}", s0, s, axis)));
            }
            axis_sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let total: usize = axis_sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&axis_sizes) {
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push(
            OpKind::Concat,
            xs.to_vec(),
            shape,
            out,
            Saved::Concat {
                axis_sizes,
                outer,
                inner,
            },
        ))
    }

    /// Averages `[B, ..., C]` over every axis between the first and the last.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(dim_err("average_pool_global", format!("need [B, ..., C], got {:?}", s)));
        }
        let (b, c) = (s[0], s[s.len() - 1]);
        let cells = numel(&s[1..s.len() - 1]);
        let flat = self.reshape(x, &[b, cells, c])?;
        let pooled = self.mean(flat, 1)?;
        // re-tag so the tape records the op by its own name
        self.nodes[pooled.0].kind = OpKind::AvgPoolGlobal;
        Ok(pooled)
    }

    /// 2×2 average pooling with stride 2 on NHWC input.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(dim_err("avg_pool2", format!("need NHWC with even H, W; got {:?}", s)));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * ho * wo * c];
        let quarter = T::from_f64(0.25);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = ((bi * ho + oy) * wo + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] = out[dst + ch] + xv[src + ch];
                        }
                    }
                    for ch in 0..c {
                        out[dst + ch] = out[dst + ch] * quarter;
                    }
                }
            }
        }
        Ok(self.push(OpKind::AvgPool2, vec![x], vec![b, ho, wo, c], out, Saved::None))
    }

    /// Selects rows (slices along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(dim_err("gather_rows", "scalar input"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(dim_err(
                "gather_rows",
                format!("index {} out of range for shape {:?}", bad, s),
            ));
        }
        let width = numel(&s[1..]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        Ok(self.push(OpKind::GatherRows, vec![x], shape, out, Saved::Gather(indices.to_vec())))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad() {
                continue;
            }
            if node.kind == OpKind::Leaf {
                leaves.insert(Var(id), g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, node: &TapeNode<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e = *e + *c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let inp = &node.inputs;
        let y = node.value.data();
        match (node.kind, &node.saved) {
            (OpKind::MatMul, &Saved::MatMul { batch, n, k, m }) => {
                let (a, b) = (inp[0], inp[1]);
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let shared = nodes[b.0].value.rank() == 2;
                if wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        kernels::gemm_nt(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &bv[bi * k * m..(bi + 1) * k * m],
                            &mut da[bi * n * k..(bi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    acc(a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let dst = if shared { 0..k * m } else { bi * k * m..(bi + 1) * k * m };
                        kernels::gemm_tn(
                            &av[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut db[dst],
                            k,
                            n,
                            m,
                        );
                    }
                    acc(b, db);
                }
            }
            (OpKind::Conv2d, Saved::Conv(geom)) => {
                let (x, w) = (inp[0], inp[1]);
                let wv = nodes[w.0].value.data();
                let cout = nodes[w.0].value.shape()[3];
                let (rows, patch) = (geom.rows(), geom.patch_len());
                if wants(w) {
                    let cols = kernels::im2col(nodes[x.0].value.data(), geom);
                    let mut dw = vec![T::zero(); wv.len()];
                    kernels::gemm_tn(&cols, g, &mut dw, patch, rows, cout);
                    acc(w, dw);
                }
                if wants(x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    kernels::gemm_nt(g, wv, &mut dcols, rows, cout, patch);
                    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    acc(x, dx);
                }
            }
            (OpKind::Relu, _) => {
                let xv = nodes[inp[0].0].value.data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(inp[0], dx);
            }
            (OpKind::Add, _) | (OpKind::Mul, _) => {
                let (a, b) = (inp[0], inp[1]);
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let len = bv.len();
                let is_mul = node.kind == OpKind::Mul;
                if wants(a) {
                    let da = if is_mul {
                        g.iter().enumerate().map(|(i, &gv)| gv * bv[i % len]).collect()
                    } else {
                        g.to_vec()
                    };
                    acc(a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); len];
                    for (i, &gv) in g.iter().enumerate() {
                        let term = if is_mul { gv * av[i] } else { gv };
                        db[i % len] = db[i % len] + term;
                    }
                    acc(b, db);
                }
            }
            (OpKind::Scale, &Saved::Scale(c)) => {
                acc(inp[0], g.iter().map(|&gv| gv * c).collect());
            }
            (OpKind::Softmax, &Saved::Axis(outer, len, inner)) => {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(inp[0], dx);
            }
            (OpKind::LogSoftmax, &Saved::Axis(outer, len, inner)) => {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: T = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                acc(inp[0], dx);
            }
            (OpKind::Log, _) => {
                let xv = nodes[inp[0].0].value.data();
                acc(inp[0], g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect());
            }
            (OpKind::Exp, _) => {
                acc(inp[0], g.iter().zip(y).map(|(&gv, &v)| gv * v).collect());
            }
            (OpKind::XLogX, _) => {
                let xv = nodes[inp[0].0].value.data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv * (v.ln() + T::one())
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(inp[0], dx);
            }
            (OpKind::Sum | OpKind::Mean | OpKind::AvgPoolGlobal, &Saved::Axis(outer, len, inner)) => {
                let scale = if node.kind == OpKind::Sum {
                    T::one()
                } else {
                    T::one() / T::from_usize(len)
                };
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                acc(inp[0], dx);
            }
            (OpKind::LayerNorm, Saved::Norm { xhat, inv_std, width }) => {
                let (x, gamma, beta) = (inp[0], inp[1], inp[2]);
                let gv = nodes[gamma.0].value.data();
                let w = *width;
                let rows = xhat.len() / w.max(1);
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![T::zero(); w];
                    let mut db = vec![T::zero(); w];
                    for r in 0..rows {
                        for j in 0..w {
                            dg[j] = dg[j] + g[r * w + j] * xhat[r * w + j];
                            db[j] = db[j] + g[r * w + j];
                        }
                    }
                    acc(gamma, dg);
                    acc(beta, db);
                }
                if wants(x) {
                    let wn = T::from_usize(w);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..w {
                            let dh = g[r * w + j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[r * w + j];
                        }
                        for j in 0..w {
                            let dh = g[r * w + j] * gv[j];
                            dx[r * w + j] = inv_std[r] / wn * (wn * dh - s1 - xhat[r * w + j] * s2);
                        }
                    }
                    acc(x, dx);
                }
            }
            (OpKind::BatchNormTrain, Saved::Norm { xhat, inv_std, width }) => {
                let (x, gamma, beta) = (inp[0], inp[1], inp[2]);
                let gv = nodes[gamma.0].value.data();
                let ch = *width;
                let rows = xhat.len() / ch;
                let mut dg = vec![T::zero(); ch];
                let mut db = vec![T::zero(); ch];
                for r in 0..rows {
                    for c in 0..ch {
                        dg[c] = dg[c] + g[r * ch + c] * xhat[r * ch + c];
                        db[c] = db[c] + g[r * ch + c];
                    }
                }
                if wants(x) {
                    let rn = T::from_usize(rows);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        for c in 0..ch {
                            // sum(dxhat) = gamma·db, sum(dxhat·xhat) = gamma·dg
                            let dh = g[r * ch + c] * gv[c];
                            dx[r * ch + c] =
                                inv_std[c] / rn * (rn * dh - gv[c] * db[c] - xhat[r * ch + c] * gv[c] * dg[c]);
                        }
                    }
                    acc(x, dx);
                }
                acc(gamma, dg);
                acc(beta, db);
            }
            (OpKind::BatchNormEval, Saved::BnEval { xhat, inv_std }) => {
                let (x, gamma, beta) = (inp[0], inp[1], inp[2]);
                let gv = nodes[gamma.0].value.data();
                let ch = gv.len();
                if wants(x) {
                    acc(
                        x,
                        g.iter()
                            .enumerate()
                            .map(|(i, &d)| d * gv[i % ch] * inv_std[i % ch])
                            .collect(),
                    );
                }
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![T::zero(); ch];
                    let mut db = vec![T::zero(); ch];
                    for (i, &d) in g.iter().enumerate() {
                        dg[i % ch] = dg[i % ch] + d * xhat[i];
                        db[i % ch] = db[i % ch] + d;
                    }
                    acc(gamma, dg);
                    acc(beta, db);
                }
            }
            (OpKind::Reshape, _) => acc(inp[0], g.to_vec()),
            (OpKind::Permute, Saved::Permute(perm)) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(inp[0], kernels::permute(g, node.value.shape(), &inverse));
            }
            (
                OpKind::Concat,
                Saved::Concat {
                    axis_sizes,
                    outer,
                    inner,
                },
            ) => {
                let total: usize = axis_sizes.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inp.iter().zip(axis_sizes) {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    acc(v, dx);
                }
            }
            (OpKind::AvgPool2, _) => {
                let s = nodes[inp[0].0].value.shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let src = ((bi * ho + oy) * wo + ox) * c;
                            for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let dst = ((bi * h + 2 * oy + dy) * w + 2 * ox + ddx) * c;
                                for ch in 0..c {
                                    dx[dst + ch] = g[src + ch] * quarter;
                                }
                            }
                        }
                    }
                }
                acc(inp[0], dx);
            }
            (OpKind::GatherRows, Saved::Gather(indices)) => {
                let xn = nodes[inp[0].0].value.numel();
                let rows = nodes[inp[0].0].value.shape()[0];
                let width = xn / rows.max(1);
                let mut dx = vec![T::zero(); xn];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..width {
                        dx[i * width + j] = dx[i * width + j] + g[k * width + j];
                    }
                }
                acc(inp[0], dx);
            }
            (kind, _) => unreachable!("no backward rule for {:?} with its saved context", kind),
        }
    }
}
