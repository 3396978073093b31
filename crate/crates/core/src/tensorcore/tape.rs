//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! whatever it needs for the backward pass. Nodes are recorded in execution
//! order, so walking the tape backwards is a valid topological order.
//!
//! A tape supports exactly one backward pass. After `backward` the recorded
//! nodes are dropped and the tape refuses further use.

use std::collections::BTreeMap;

use super::kernels::{axpy, gemm, gemm_nt, gemm_tn_acc, transpose};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Guard below which a vector counts as zero for normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding mode for [`Tape::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding: only windows fully inside the signal.
    None,
    /// Zero padding of `(W - 1) / 2` frames on each side.
    Same,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Conv1d { x: Var, w: Var, stride: usize, pad: usize, cols: Vec<T> },
    AddRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    MeanAxis { x: Var, axis: usize },
    Sum { x: Var },
    Reshape { x: Var },
    NormalizeRows { x: Var, norms: Vec<T> },
    LocalMean { x: Var, window: usize },
    PairwiseSqDist { frames: Var, targets: Var, k: usize },
    Gather { x: Var, index: Vec<usize> },
    AamCe { cos: Var, pairs: Vec<(usize, usize)>, scale: T, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

#[derive(Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Broadcast role of an elementwise binary op.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn ensure_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Tape("tape already consumed by backward"))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_inner(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.ensure_live()?;
        check_finite("leaf", &t)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
            is_param: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf_inner(t, false)
    }

    /// Records a trainable input whose gradient `backward` will report.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf_inner(t, true)
    }

    /// Value of a recorded node.
    ///
    /// Panics if `v` does not belong to this tape or the tape was consumed.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Tape("variable does not belong to this tape"))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: both must be 2-D"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} != {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("transpose", format!("{s:?} is not 2-D"))),
        };
        let value = Tensor::new(vec![c, r], transpose(self.value(x).data(), r, c))?;
        self.push("transpose", value, Op::Transpose { x }, &[x])
    }

    /// 1-D convolution over time, cross-correlation convention (no kernel
    /// flip): `out[t][o] = Σ_j Σ_i x[t·stride + j − pad][i] · w[j][i][o]`.
    ///
    /// `x` is `T×Cin`, `w` is `W×Cin×Cout` with odd `W`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        self.check_var(w)?;
        let (t_in, c_in) = match self.shape(x) {
            [t, c] => (*t, *c),
            s => return Err(Error::shape("conv1d", format!("input {s:?} is not T x Cin"))),
        };
        let (width, wc_in, c_out) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::shape("conv1d", format!("kernel {s:?} is not W x Cin x Cout"))),
        };
        if wc_in != c_in {
            return Err(Error::shape("conv1d", format!("kernel Cin {wc_in} != input Cin {c_in}")));
        }
        if width % 2 == 0 {
            return Err(Error::shape("conv1d", format!("kernel width {width} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d stride must be >= 1".into()));
        }
        let pad = match padding {
            Padding::None => 0,
            Padding::Same => (width - 1) / 2,
        };
        if t_in + 2 * pad < width {
            return Err(Error::shape("conv1d", format!("kernel width {width} exceeds {t_in} frames")));
        }
        let t_out = (t_in + 2 * pad - width) / stride + 1;
        let patch = width * c_in;
        let xs = self.value(x).data();
        let mut cols = vec![T::zero(); t_out * patch];
        for t in 0..t_out {
            let row = &mut cols[t * patch..(t + 1) * patch];
            for j in 0..width {
                let src = (t * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let src = src as usize;
                row[j * c_in..(j + 1) * c_in].copy_from_slice(&xs[src * c_in..(src + 1) * c_in]);
            }
        }
        let mut out = vec![T::zero(); t_out * c_out];
        gemm(&cols, self.value(w).data(), &mut out, t_out, patch, c_out);
        let value = Tensor::new(vec![t_out, c_out], out)?;
        self.push("conv1d", value, Op::Conv1d { x, w, stride, pad, cols }, &[x, w])
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        self.check_var(bias)?;
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("add_row", format!("{s:?} is not 2-D"))),
        };
        if self.value(bias).numel() != c || self.shape(bias).len() != 1 {
            return Err(Error::shape("add_row", format!("bias {:?} vs {c} columns", self.shape(bias))));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push("add_row", value, Op::AddRow { x, bias }, &[x, bias])
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok((Bcast::Same, va.shape().to_vec()))
        } else if vb.numel() == 1 {
            Ok((Bcast::RightScalar, va.shape().to_vec()))
        } else if va.numel() == 1 {
            Ok((Bcast::LeftScalar, vb.shape().to_vec()))
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?} (only scalar broadcast)", va.shape(), vb.shape())))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        self.ensure_live()?;
        let (mode, shape) = self.bcast(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = match mode {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RightScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::LeftScalar => db.iter().map(|&y| f(da[0], y)).collect(),
        };
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", Tensor::new(shape, out)?, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Tensor::new(shape, out)?, Op::Mul { a, b }, &[a, b])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * factor).collect())?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e.max(T::zero())).collect())?;
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let n = T::of_usize(len);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xs[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (a, &s) in acc.iter_mut().zip(src) {
                    *a += s;
                }
            }
            acc.iter_mut().for_each(|a| *a = *a / n);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push("mean_axis", value, Op::MeanAxis { x, axis }, &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Scales every row (a vector counts as one row) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let v = self.value(x);
        let (rows, cols) = v
            .as_matrix_dims()
            .ok_or_else(|| Error::shape("l2_normalize", format!("{:?} is not 1-D or 2-D", v.shape())))?;
        let eps = T::of(NORM_EPS);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&e| e * e).sum::<T>().sqrt();
            if !(n > eps) {
                return Err(Error::Degenerate(format!("l2_normalize: row {r} has norm {:e}", n.as_f64())));
            }
            norms.push(n);
            out.extend(row.iter().map(|&e| e / n));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Cosine similarity of two vectors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::shape("cosine", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        let prod = self.mul(na, nb)?;
        self.sum(prod)
    }

    /// Sliding mean over rows with a centred window of odd size.
    ///
    /// Windows are truncated at the sequence boundaries: row `t` averages the
    /// rows `[t - h, t + h] ∩ [0, T)` with `h = (window - 1) / 2`.
    pub fn local_mean(&mut self, x: Var, window: usize) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        if window % 2 == 0 {
            return Err(Error::InvalidArgument(format!("local_mean window {window} must be odd")));
        }
        let (t_len, c) = match self.shape(x) {
            [t, c] => (*t, *c),
            s => return Err(Error::shape("local_mean", format!("{s:?} is not 2-D"))),
        };
        let half = (window - 1) / 2;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); t_len * c];
        for t in 0..t_len {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(t_len - 1);
            let dst = &mut out[t * c..(t + 1) * c];
            for s in lo..=hi {
                for (d, &v) in dst.iter_mut().zip(&xs[s * c..(s + 1) * c]) {
                    *d += v;
                }
            }
            let n = T::of_usize(hi - lo + 1);
            dst.iter_mut().for_each(|d| *d = *d / n);
        }
        let value = Tensor::new(vec![t_len, c], out)?;
        self.push("local_mean", value, Op::LocalMean { x, window }, &[x])
    }

    /// Squared distances between every target and every output slot of every
    /// frame: `out[t][k][j] = ‖targets[k] − frames[t][j]‖²`.
    ///
    /// `frames` is `T×(K·E)` with slot `j` occupying columns `[jE, (j+1)E)`,
    /// `targets` is `K×E`. The result is `T×K×K`.
    pub fn pairwise_sq_dist(&mut self, frames: Var, targets: Var) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(frames)?;
        self.check_var(targets)?;
        let (k, e) = match self.shape(targets) {
            [k, e] => (*k, *e),
            s => return Err(Error::shape("pairwise_sq_dist", format!("targets {s:?} not K x E"))),
        };
        let (t_len, ke) = match self.shape(frames) {
            [t, ke] => (*t, *ke),
            s => return Err(Error::shape("pairwise_sq_dist", format!("frames {s:?} not T x KE"))),
        };
        if ke != k * e {
            return Err(Error::shape("pairwise_sq_dist", format!("frames have {ke} columns, targets need {k}x{e}")));
        }
        let fs = self.value(frames).data();
        let ts = self.value(targets).data();
        let mut out = Vec::with_capacity(t_len * k * k);
        for t in 0..t_len {
            let frame = &fs[t * ke..(t + 1) * ke];
            for kk in 0..k {
                let target = &ts[kk * e..(kk + 1) * e];
                for j in 0..k {
                    let slot = &frame[j * e..(j + 1) * e];
                    out.push(target.iter().zip(slot).map(|(&a, &b)| (a - b) * (a - b)).sum());
                }
            }
        }
        let value = Tensor::new(vec![t_len, k, k], out)?;
        self.push("pairwise_sq_dist", value, Op::PairwiseSqDist { frames, targets, k }, &[frames, targets])
    }

    /// Picks elements of the flattened input by index, producing a vector.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(x)?;
        let xs = self.value(x).data();
        if index.is_empty() {
            return Err(Error::shape("gather", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xs.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", xs.len())));
        }
        let value = Tensor::from_vec(index.iter().map(|&i| xs[i]).collect());
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Additive-angular-margin softmax cross-entropy on a cosine matrix.
    ///
    /// `cos` is `N×C`. For every `(row, label)` pair the logits are
    /// `scale·cos[row][j]`, with `scale·margin` subtracted at `j = label`; the
    /// output holds one cross-entropy value per pair.
    pub fn aam_ce(&mut self, cos: Var, pairs: Vec<(usize, usize)>, scale: T, margin: T) -> Result<Var> {
        self.ensure_live()?;
        self.check_var(cos)?;
        let (n, c) = match self.shape(cos) {
            [n, c] => (*n, *c),
            s => return Err(Error::shape("aam_ce", format!("{s:?} is not N x C"))),
        };
        if pairs.is_empty() {
            return Err(Error::shape("aam_ce", "no (row, label) pairs"));
        }
        let cs = self.value(cos).data();
        let mut probs = Vec::with_capacity(pairs.len() * c);
        let mut out = Vec::with_capacity(pairs.len());
        let mut logits = vec![T::zero(); c];
        for &(r, label) in &pairs {
            if r >= n {
                return Err(Error::shape("aam_ce", format!("row {r} out of {n}")));
            }
            if label >= c {
                return Err(Error::InvalidArgument(format!("label {label} out of {c} classes")));
            }
            for (j, z) in logits.iter_mut().enumerate() {
                *z = scale * cs[r * c + j];
            }
            logits[label] -= scale * margin;
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = logits.iter().map(|&z| (z - m).exp()).sum();
            out.push(m + denom.ln() - logits[label]);
            probs.extend(logits.iter().map(|&z| (z - m).exp() / denom));
        }
        let value = Tensor::from_vec(out);
        self.push("aam_ce", value, Op::AamCe { cos, pairs, scale, probs }, &[cos])
    }

    /// Runs the backward pass from a one-element loss and returns gradients
    /// for every parameter leaf. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.ensure_live()?;
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called without a forward pass"));
        }
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}, expected scalar", self.shape(loss))));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if nodes[a.0].needs_grad {
                        let mut da = vec![T::zero(); m * k];
                        gemm_nt(&g, nodes[b.0].value.data(), &mut da, m, n, k);
                        axpy(T::one(), &da, acc(&mut grads, &nodes, *a).unwrap());
                    }
                    if let Some(db) = acc(&mut grads, &nodes, *b) {
                        gemm_tn_acc(nodes[a.0].value.data(), &g, db, m, k, n);
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        axpy(T::one(), &transpose(&g, c, r), dx);
                    }
                }
                Op::Conv1d { x, w, stride, pad, cols } => {
                    let (t_in, c_in) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let ws = nodes[w.0].value.shape();
                    let (width, c_out) = (ws[0], ws[2]);
                    let patch = width * c_in;
                    let t_out = node.value.shape()[0];
                    if let Some(dw) = acc(&mut grads, &nodes, *w) {
                        gemm_tn_acc(cols, &g, dw, t_out, patch, c_out);
                    }
                    if nodes[x.0].needs_grad {
                        let mut dcols = vec![T::zero(); t_out * patch];
                        gemm_nt(&g, nodes[w.0].value.data(), &mut dcols, t_out, c_out, patch);
                        let dx = acc(&mut grads, &nodes, *x).unwrap();
                        for t in 0..t_out {
                            for j in 0..width {
                                let src = (t * stride + j) as isize - *pad as isize;
                                if src < 0 || src as usize >= t_in {
                                    continue;
                                }
                                let src = src as usize;
                                let from = &dcols[t * patch + j * c_in..t * patch + (j + 1) * c_in];
                                for (d, &v) in dx[src * c_in..(src + 1) * c_in].iter_mut().zip(from) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    let c = nodes[bias.0].value.numel();
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        axpy(T::one(), &g, dx);
                    }
                    if let Some(db) = acc(&mut grads, &nodes, *bias) {
                        for row in g.chunks(c) {
                            axpy(T::one(), row, db);
                        }
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                    for (v, s) in [(*a, T::one()), (*b, sign)] {
                        let scalar = nodes[v.0].value.numel() == 1 && g.len() != 1;
                        if let Some(d) = acc(&mut grads, &nodes, v) {
                            if scalar {
                                d[0] += s * g.iter().copied().sum::<T>();
                            } else {
                                axpy(s, &g, d);
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if !nodes[v.0].needs_grad {
                            continue;
                        }
                        let ov = nodes[other.0].value.data();
                        let contrib: Vec<T> = if ov.len() == 1 {
                            g.iter().map(|&gv| gv * ov[0]).collect()
                        } else {
                            g.iter().zip(ov).map(|(&gv, &o)| gv * o).collect()
                        };
                        let d = acc(&mut grads, &nodes, v).unwrap();
                        if d.len() == 1 && contrib.len() != 1 {
                            d[0] += contrib.iter().copied().sum::<T>();
                        } else {
                            axpy(T::one(), &contrib, d);
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        axpy(*factor, &g, dx);
                    }
                }
                Op::Relu { x } => {
                    let xs = nodes[x.0].value.data();
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(xs) {
                            if xv > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::MeanAxis { x, axis } => {
                    let shape = nodes[x.0].value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let inv = T::one() / T::of_usize(len);
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                axpy(inv, src, &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner]);
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        dx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Reshape { x } => {
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        axpy(T::one(), &g, dx);
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.data();
                    let cols = y.len() / norms.len();
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        for (r, &n) in norms.iter().enumerate() {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &yv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                                *d += (gv - yv * dot) / n;
                            }
                        }
                    }
                }
                Op::LocalMean { x, window } => {
                    let (t_len, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let half = (window - 1) / 2;
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        for t in 0..t_len {
                            let lo = t.saturating_sub(half);
                            let hi = (t + half).min(t_len - 1);
                            let inv = T::one() / T::of_usize(hi - lo + 1);
                            let gt = &g[t * c..(t + 1) * c];
                            for s in lo..=hi {
                                axpy(inv, gt, &mut dx[s * c..(s + 1) * c]);
                            }
                        }
                    }
                }
                Op::PairwiseSqDist { frames, targets, k } => {
                    let k = *k;
                    let fs = nodes[frames.0].value.data();
                    let ts = nodes[targets.0].value.data();
                    let e = ts.len() / k;
                    let ke = k * e;
                    let t_len = fs.len() / ke;
                    let two = T::of(2.0);
                    if nodes[frames.0].needs_grad {
                        let df = acc(&mut grads, &nodes, *frames).unwrap();
                        for t in 0..t_len {
                            for kk in 0..k {
                                for j in 0..k {
                                    let gv = g[(t * k + kk) * k + j] * two;
                                    for ei in 0..e {
                                        let fi = t * ke + j * e + ei;
                                        df[fi] += gv * (fs[fi] - ts[kk * e + ei]);
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dt) = acc(&mut grads, &nodes, *targets) {
                        for t in 0..t_len {
                            for kk in 0..k {
                                for j in 0..k {
                                    let gv = g[(t * k + kk) * k + j] * two;
                                    for ei in 0..e {
                                        dt[kk * e + ei] += gv * (ts[kk * e + ei] - fs[t * ke + j * e + ei]);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Gather { x, index } => {
                    if let Some(dx) = acc(&mut grads, &nodes, *x) {
                        for (&i, &gv) in index.iter().zip(&g) {
                            dx[i] += gv;
                        }
                    }
                }
                Op::AamCe { cos, pairs, scale, probs } => {
                    let c = nodes[cos.0].value.shape()[1];
                    if let Some(dc) = acc(&mut grads, &nodes, *cos) {
                        for (p, &(r, label)) in pairs.iter().enumerate() {
                            let gp = g[p] * *scale;
                            let pr = &probs[p * c..(p + 1) * c];
                            let row = &mut dc[r * c..(r + 1) * c];
                            for (j, d) in row.iter_mut().enumerate() {
                                let onehot = if j == label { T::one() } else { T::zero() };
                                *d += gp * (pr[j] - onehot);
                            }
                        }
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.is_param {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }
}
