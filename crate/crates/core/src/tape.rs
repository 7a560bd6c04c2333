//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. Nodes whose
//! inputs all lack `requires_grad` are stored as constants and skipped by
//! the backward sweep. Node ids are assigned in creation order, so the tape
//! is topologically sorted by construction.
//!
//! A tape runs one backward sweep; a second call fails until
//! [`Tape::reset_grads`] clears the accumulated gradients. Parameter
//! gradients over a batch are always summed in sample order.

use crate::error::{Error, Result};
use crate::fuzzy::{self, FuzzyHeadParams, HeadGradients};
use crate::tensor::{window_out, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
}

/// How ReLU nodes propagate during the backward sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardMode {
    #[default]
    Standard,
    /// Guided backpropagation: a ReLU passes the signal only where both its
    /// forward input and the incoming gradient are positive.
    Guided,
}

/// Statistics source for [`Tape::normalize`].
#[derive(Clone, Debug)]
pub enum NormStats<T> {
    /// Normalize with the mean and biased variance of the current batch.
    Batch,
    /// Normalize with externally supplied per-channel statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

/// Operation selector for [`Tape::forward_op`].
#[derive(Clone, Debug)]
pub enum OpKind<T> {
    MatMul,
    Conv2d(ConvAttrs),
    MaxPool2d(PoolAttrs),
    Relu,
    Add,
    Scale(T),
    Flatten,
    BatchStatsNormalize { eps: T },
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, attrs: ConvAttrs },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Reshape { x: Var },
    Normalize { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Tile { x: Var, copies: usize },
    Expand { p: Var },
    SumLast { a: Var },
    Transpose { a: Var },
    Sum { a: Var },
    Pick { a: Var, index: usize },
    Softmax { a: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    FuzzyLogits { x: Var, mu: Var, beta: Var, w: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    /// First node whose value was not finite (tracked in debug builds).
    first_non_finite: Option<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Real>, operand: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(operand, "rank 4 (N, C, H, W)", t.shape())),
    }
}

fn dims2(t: &Tensor<impl Real>, operand: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [m, n] => Ok([m, n]),
        _ => Err(Error::shape(operand, "rank 2", t.shape())),
    }
}

/// Dot product with eight independent partial sums combined in a fixed
/// order, so the result is deterministic and the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one `C x H x W` sample into a `(C*KH*KW) x (OH*OW)` matrix.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                let d = &mut dx[base + ix as usize];
                                *d = *d + col[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; it takes part in differentiation if its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.needs_grad();
        self.push_raw(t, Op::Leaf, rg)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last backward sweep.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Drops accumulated gradients so the tape can be swept again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// In debug builds, the first recorded value containing NaN or Inf.
    /// Backward refuses to run past such a node.
    pub fn non_finite_node(&self) -> Option<Var> {
        self.first_non_finite.map(Var)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Constant };
        self.push_raw(value, op, rg)
    }

    /// Dispatches one of the core operation kinds by value.
    pub fn forward_op(&mut self, kind: OpKind<T>, inputs: &[Var]) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape("operation inputs", format!("{n} inputs"), &[inputs.len()]))
            }
        };
        match kind {
            OpKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Conv2d(attrs) => match inputs {
                [x, w] => self.conv2d(*x, *w, None, attrs),
                [x, w, b] => self.conv2d(*x, *w, Some(*b), attrs),
                _ => Err(Error::shape("conv2d inputs", "2 or 3 inputs", &[inputs.len()])),
            },
            OpKind::MaxPool2d(attrs) => {
                need(1)?;
                self.maxpool2d(inputs[0], attrs)
            }
            OpKind::Relu => {
                need(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Scale(s) => {
                need(1)?;
                Ok(self.scale(inputs[0], s))
            }
            OpKind::Flatten => {
                need(1)?;
                self.flatten(inputs[0])
            }
            OpKind::BatchStatsNormalize { eps } => {
                need(3)?;
                self.normalize(inputs[0], inputs[1], inputs[2], NormStats::Batch, eps)
                    .map(|(v, _, _)| v)
            }
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = dims2(self.value(a), "matmul lhs")?;
        let [k2, n] = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape("matmul rhs", format!("{k} rows"), self.value(b).shape()));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(av[i * k + p], &bv[p * n..(p + 1) * n], row);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Cross-correlation of an `N x C x H x W` batch with an `O x C x KH x KW`
    /// kernel, optional per-channel bias. Each sample is computed
    /// independently, so results do not depend on the batch size.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: ConvAttrs) -> Result<Var> {
        let [n, c, h, wd] = dims4(self.value(x), "conv2d input")?;
        let [o, c2, kh, kw] = dims4(self.value(w), "conv2d kernel")?;
        if c != c2 {
            return Err(Error::shape(
                "conv2d kernel",
                format!("{c} input channels"),
                self.value(w).shape(),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("conv2d bias", format!("[{o}]"), self.value(b).shape()));
            }
        }
        let (oh, ow) = match (
            window_out(h, kh, attrs.stride, attrs.pad),
            window_out(wd, kw, attrs.stride, attrs.pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d input",
                    format!("spatial extent >= kernel {kh}x{kw} with pad {}", attrs.pad),
                    self.value(x).shape(),
                ))
            }
        };
        let g = ConvGeom { c, h, w: wd, kh, kw, oh, ow, stride: attrs.stride, pad: attrs.pad };
        let (k, p) = (g.rows(), g.cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * o * p];
        let mut col = vec![T::zero(); k * p];
        for s in 0..n {
            g.im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &mut col);
            let os = &mut out[s * o * p..(s + 1) * o * p];
            for oc in 0..o {
                let row = &mut os[oc * p..(oc + 1) * p];
                if let Some(bv) = bv {
                    row.fill(bv[oc]);
                }
                for kk in 0..k {
                    axpy(wv[oc * k + kk], &col[kk * p..(kk + 1) * p], row);
                }
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, attrs }, &inputs))
    }

    /// Max pooling without padding; ties resolve to the first maximum in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, attrs: PoolAttrs) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "maxpool2d input")?;
        let (oh, ow) = match (
            window_out(h, attrs.kernel, attrs.stride, 0),
            window_out(w, attrs.kernel, attrs.stride, 0),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "maxpool2d input",
                    format!("spatial extent >= window {}", attrs.kernel),
                    self.value(x).shape(),
                ))
            }
        };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * attrs.stride * w + ox * attrs.stride;
                    for ky in 0..attrs.kernel {
                        for kx in 0..attrs.kernel {
                            let idx = base + (oy * attrs.stride + ky) * w + ox * attrs.stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, operand: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                operand,
                format!("{:?}", self.value(a).shape()),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add rhs")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub rhs")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul rhs")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a per-channel bias along axis 1 of an `N x C x ...` tensor. The
    /// only broadcasting the tape supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 || self.value(bias).shape() != [shape[1]] {
            return Err(Error::shape(
                "bias",
                format!("[{}]", shape.get(1).copied().unwrap_or(0)),
                self.value(bias).shape(),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let bv = self.value(bias).data();
        let c = shape[1];
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bv[(i / inner) % c])
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| *x * s).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { a, s }, &[a])
    }

    /// `N x ... -> N x (product of the rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().first().ok_or_else(|| Error::shape("flatten", "rank >= 1", v.shape()))?;
        let value = v.clone().requires_grad(false).reshape(vec![n, v.len() / n])?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Per-channel normalization of `N x C x H x W` (or `N x C`) followed by
    /// the affine map `gamma * xhat + beta`. Returns the output together
    /// with the mean and biased variance that were used.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::shape("normalize input", "rank 2 or 4", &shape));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (v, name) in [(gamma, "normalize gamma"), (beta, "normalize beta")] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(name, format!("[{c}]"), self.value(v).shape()));
            }
        }
        let xv = self.value(x).data();
        let count = T::from_f64((n * inner) as f64);
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for e in &xv[(s * c + ch) * inner..][..inner] {
                            mean[ch] = mean[ch] + *e;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / count);
                for s in 0..n {
                    for ch in 0..c {
                        for e in &xv[(s * c + ch) * inner..][..inner] {
                            let d = *e - mean[ch];
                            var[ch] = var[ch] + d * d;
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / count);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("normalize statistics", format!("[{c}]"), &[mean.len()]));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, e) in xv.iter().enumerate() {
            let ch = (i / inner) % c;
            let h = (*e - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(gv[ch] * h + bv[ch]);
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::Normalize { x, gamma, beta, xhat, inv_std, batch };
        Ok((self.push(value, op, &[x, gamma, beta]), mean, var))
    }

    /// `N x V -> N x copies x V`, repeating each row.
    pub fn tile(&mut self, x: Var, copies: usize) -> Result<Var> {
        let [n, v] = dims2(self.value(x), "tile input")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * copies * v);
        for s in 0..n {
            for _ in 0..copies {
                out.extend_from_slice(&xv[s * v..(s + 1) * v]);
            }
        }
        let value = Tensor::new(vec![n, copies, v], out)?;
        Ok(self.push(value, Op::Tile { x, copies }, &[x]))
    }

    /// `shape -> copies x shape`, stacking the whole tensor.
    pub fn expand(&mut self, p: Var, copies: usize) -> Result<Var> {
        let pv = self.value(p);
        let mut shape = vec![copies];
        shape.extend_from_slice(pv.shape());
        let mut out = Vec::with_capacity(copies * pv.len());
        for _ in 0..copies {
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Expand { p }, &[p]))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() < 2 {
            return Err(Error::shape("sum_last input", "rank >= 2", av.shape()));
        }
        let last = *av.shape().last().expect("rank >= 2");
        let data = av
            .data()
            .chunks_exact(last)
            .map(|row| row.iter().fold(T::zero(), |acc, v| acc + *v))
            .collect();
        let value = Tensor::new(av.shape()[..av.shape().len() - 1].to_vec(), data)?;
        Ok(self.push(value, Op::SumLast { a }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [m, n] = dims2(self.value(a), "transpose input")?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, v| acc + *v);
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Selects one element by flat index as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let av = self.value(a);
        let v = *av.data().get(index).ok_or_else(|| {
            Error::shape("pick index", format!("< {}", av.len()), &[index])
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Pick { a, index }, &[a]))
    }

    /// Row-wise max-shifted softmax of an `N x C` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let [n, c] = dims2(self.value(a), "softmax input")?;
        let mut out = Vec::with_capacity(n * c);
        for row in self.value(a).data().chunks_exact(c) {
            out.extend(fuzzy::class_probabilities(row));
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Mean categorical cross-entropy of row-wise softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, c] = dims2(self.value(logits), "cross-entropy logits")?;
        if labels.len() != n {
            return Err(Error::shape("labels", format!("length {n}"), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= c) {
            return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (row, &label) in lv.chunks_exact(c).zip(labels) {
            total = total + (fuzzy::log_sum_exp(row) - row[label]);
        }
        let loss = total / T::from_f64(n as f64);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Fuzzy-head logits for an `N x V` batch. Backward uses the closed-form
    /// gradients in [`fuzzy::analytic_gradients`].
    pub fn fuzzy_logits(&mut self, x: Var, mu: Var, beta: Var, w: Var, b: Var) -> Result<Var> {
        let [n, v] = dims2(self.value(x), "fuzzy head input")?;
        let [c, v2] = dims2(self.value(mu), "fuzzy head mu")?;
        if v != v2 {
            return Err(Error::shape("fuzzy head mu", format!("[{c}, {v}]"), self.value(mu).shape()));
        }
        let params = self.head_params(mu, beta, w, b)?;
        let mut out = vec![T::zero(); n * c];
        fuzzy::logits_batch(self.value(x).data(), &params, &mut out);
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::FuzzyLogits { x, mu, beta, w, b }, &[x, mu, beta, w, b]))
    }

    fn head_params(&self, mu: Var, beta: Var, w: Var, b: Var) -> Result<FuzzyHeadParams<T>> {
        let [c, v] = dims2(self.value(mu), "fuzzy head mu")?;
        FuzzyHeadParams::new(
            c,
            v,
            self.value(mu).data().to_vec(),
            self.value(beta).data().to_vec(),
            self.value(w).data().to_vec(),
            self.value(b).data().to_vec(),
        )
    }

    /// Backward sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        self.backward_from(loss, &[T::one()], BackwardMode::Standard)
    }

    /// Backward sweep from an arbitrary node seeded with `seed`.
    pub fn backward_from(&mut self, output: Var, seed: &[T], mode: BackwardMode) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if let Some(id) = self.first_non_finite.filter(|&id| id <= output.0) {
            return Err(Error::NonFinite(format!("forward value of tape node {id}")));
        }
        if seed.len() != self.value(output).len() {
            return Err(Error::shape(
                "backward seed",
                format!("{} values", self.value(output).len()),
                &[seed.len()],
            ));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(seed.to_vec());
        let Tape { nodes, grads, .. } = self;
        for id in (0..=output.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(nodes, grads, id, &g, mode)?;
            grads[id] = Some(g);
        }
        if cfg!(debug_assertions) {
            if let Some(id) = grads.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
                return Err(Error::NonFinite(format!("gradient of tape node {id}")));
            }
        }
        Ok(())
    }
}

/// Gradient slot for `v`, zero-initialised on first use. `None` when `v`
/// does not take part in differentiation.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    g: &[T],
    mode: BackwardMode,
) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] = da[i * k + p] + dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..m {
                    for p in 0..k {
                        axpy(av[i * k + p], &g[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, attrs } => {
            let [n, c, h, wd] = dims4(&nodes[x.0].value, "conv2d input")?;
            let [o, _, kh, kw] = dims4(&nodes[w.0].value, "conv2d kernel")?;
            let out_shape = nodes[id].value.shape();
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let geo = ConvGeom { c, h, w: wd, kh, kw, oh, ow, stride: attrs.stride, pad: attrs.pad };
            let (k, p) = (geo.rows(), geo.cols());
            let (xv, wv) = (val(*x), val(*w));
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for s in 0..n {
                        for oc in 0..o {
                            let row = &g[(s * o + oc) * p..][..p];
                            db[oc] = db[oc] + row.iter().fold(T::zero(), |acc, v| acc + *v);
                        }
                    }
                }
            }
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut col = vec![T::zero(); k * p];
            let mut dw = if need_w { vec![T::zero(); o * k] } else { Vec::new() };
            let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            let mut dcol = if need_x { vec![T::zero(); k * p] } else { Vec::new() };
            let plane = c * h * wd;
            for s in 0..n {
                let gs = &g[s * o * p..(s + 1) * o * p];
                if need_w {
                    geo.im2col(&xv[s * plane..(s + 1) * plane], &mut col);
                    for oc in 0..o {
                        let grow = &gs[oc * p..(oc + 1) * p];
                        for kk in 0..k {
                            dw[oc * k + kk] = dw[oc * k + kk] + dot(grow, &col[kk * p..(kk + 1) * p]);
                        }
                    }
                }
                if need_x {
                    dcol.fill(T::zero());
                    for oc in 0..o {
                        let grow = &gs[oc * p..(oc + 1) * p];
                        for kk in 0..k {
                            axpy(wv[oc * k + kk], grow, &mut dcol[kk * p..(kk + 1) * p]);
                        }
                    }
                    geo.col2im(&dcol, &mut dx[s * plane..(s + 1) * plane]);
                }
            }
            if let Some(slot_w) = slot(nodes, grads, *w) {
                axpy(T::one(), &dw, slot_w);
            }
            if let Some(slot_x) = slot(nodes, grads, *x) {
                axpy(T::one(), &dx, slot_x);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] = dx[src] + *gi;
                }
            }
        }
        Op::Relu { x } => {
            let xv = val(*x);
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    let open = match mode {
                        BackwardMode::Standard => *xi > T::zero(),
                        BackwardMode::Guided => *xi > T::zero() && *gi > T::zero(),
                    };
                    if open {
                        *d = *d + *gi;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(T::one(), g, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                axpy(T::one(), g, db);
            }
        }
        Op::Sub { a, b } => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(T::one(), g, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                axpy(-T::one(), g, db);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d = *d + *gi * *bi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d = *d + *gi * *ai;
                }
            }
        }
        Op::AddBias { a, bias } => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(T::one(), g, da);
            }
            let shape = nodes[a.0].value.shape();
            let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
            if let Some(db) = slot(nodes, grads, *bias) {
                for (i, gi) in g.iter().enumerate() {
                    let ch = (i / inner) % c;
                    db[ch] = db[ch] + *gi;
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(da) = slot(nodes, grads, *a) {
                axpy(*s, g, da);
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                axpy(T::one(), g, dx);
            }
        }
        Op::Normalize { x, gamma, beta, xhat, inv_std, batch } => {
            let shape = nodes[x.0].value.shape();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let gv = val(*gamma);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (i, gi) in g.iter().enumerate() {
                let ch = (i / inner) % c;
                sum_g[ch] = sum_g[ch] + *gi;
                sum_gx[ch] = sum_gx[ch] + *gi * xhat[i];
            }
            if let Some(dgamma) = slot(nodes, grads, *gamma) {
                axpy(T::one(), &sum_gx, dgamma);
            }
            if let Some(dbeta) = slot(nodes, grads, *beta) {
                axpy(T::one(), &sum_g, dbeta);
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let m = T::from_f64((n * inner) as f64);
                for (i, gi) in g.iter().enumerate() {
                    let ch = (i / inner) % c;
                    let scale = gv[ch] * inv_std[ch];
                    let d = if *batch {
                        scale * (*gi - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                    } else {
                        scale * *gi
                    };
                    dx[i] = dx[i] + d;
                }
            }
        }
        Op::Tile { x, copies } => {
            let v = nodes[x.0].value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, grow) in g.chunks_exact(v).enumerate() {
                    let s = r / copies;
                    axpy(T::one(), grow, &mut dx[s * v..(s + 1) * v]);
                }
            }
        }
        Op::Expand { p } => {
            let len = nodes[p.0].value.len();
            if let Some(dp) = slot(nodes, grads, *p) {
                for chunk in g.chunks_exact(len) {
                    axpy(T::one(), chunk, dp);
                }
            }
        }
        Op::SumLast { a } => {
            let last = *nodes[a.0].value.shape().last().expect("rank >= 2");
            if let Some(da) = slot(nodes, grads, *a) {
                for (row, gi) in da.chunks_exact_mut(last).zip(g) {
                    row.iter_mut().for_each(|d| *d = *d + *gi);
                }
            }
        }
        Op::Transpose { a } => {
            let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + g[j * m + i];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Pick { a, index } => {
            if let Some(da) = slot(nodes, grads, *a) {
                da[*index] = da[*index] + g[0];
            }
        }
        Op::Softmax { a } => {
            let y = nodes[id].value.data();
            let c = nodes[id].value.shape()[1];
            if let Some(da) = slot(nodes, grads, *a) {
                for ((drow, grow), yrow) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let inner = grow.iter().zip(yrow).fold(T::zero(), |acc, (gi, yi)| acc + *gi * *yi);
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + *yi * (*gi - inner);
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let c = nodes[logits.0].value.shape()[1];
            let lv = val(*logits);
            let scale = g[0] / T::from_f64(labels.len() as f64);
            if let Some(dl) = slot(nodes, grads, *logits) {
                for ((drow, row), &label) in dl.chunks_exact_mut(c).zip(lv.chunks_exact(c)).zip(labels) {
                    let y = fuzzy::class_probabilities(row);
                    for (k, (d, yk)) in drow.iter_mut().zip(&y).enumerate() {
                        let t = if k == label { T::one() } else { T::zero() };
                        *d = *d + scale * (*yk - t);
                    }
                }
            }
        }
        Op::FuzzyLogits { x, mu, beta, w, b } => {
            let xv = &nodes[x.0].value;
            let batch = xv.shape()[0];
            let c = nodes[mu.0].value.shape()[0];
            let v = xv.shape()[1];
            let params = FuzzyHeadParams::new(
                c,
                v,
                val(*mu).to_vec(),
                val(*beta).to_vec(),
                val(*w).to_vec(),
                val(*b).to_vec(),
            )?;
            let mut hg = HeadGradients::zeros(batch, c, v);
            fuzzy::accumulate_gradients(xv.data(), &params, g, &mut hg);
            for (var, part) in [(*x, &hg.x), (*mu, &hg.mu), (*beta, &hg.beta), (*w, &hg.w), (*b, &hg.b)] {
                if let Some(d) = slot(nodes, grads, var) {
                    axpy(T::one(), part, d);
                }
            }
        }
    }
    Ok(())
}
