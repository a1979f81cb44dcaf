//! Tape-based reverse-mode differentiation.
//!
//! Every operation computes its value eagerly and appends a node to the tape;
//! [`Graph::backward`] walks the tape in reverse. Operations are coarse
//! (matmul, convolution, layer norm, attention, fused losses) with
//! hand-written adjoints, which keeps the tape short for recurrent models.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::loss::{self, LossKind};
use crate::nn::params::ParameterSet;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, T),
    Cols { x: Var, start: usize },
    TimeStep { x: Var, t: usize },
    StackTime(Vec<Var>),
    Concat(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, dilation: usize, pad_left: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    MeanTime(Var),
    MeanAll(Var),
    AddConst(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Loss { logits: Var, labels: Vec<T>, kind: LossKind },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter index. Frozen parameters have no entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, param: usize) -> Option<&Tensor<T>> {
        self.grads.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads.iter().map(|(i, t)| (*i, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    tracking: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `a [m, k] x b [k, n]`.
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    debug_assert_eq!(out.len(), m * n);
    out
}

/// Transpose of a row-major `[r, c]` matrix.
fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for (i, row) in a.chunks_exact(c).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j * r + i] = v;
        }
    }
    out
}

/// `g [m, n] x b^T` where `b` is `[k, n]`; result `[m, k]`.
fn mm_bt<T: Scalar>(g: &[T], b: &[T], k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, k, n);
    mm(g, &bt, g.len() / n, n, k)
}

/// `a^T x g` where `a` is `[m, k]` and `g` is `[m, n]`; result `[k, n]`.
fn mm_at<T: Scalar>(a: &[T], g: &[T], k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn map<T: Scalar>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), tracking: true }
    }

    /// A graph that records values only; nothing requires gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), tracking: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Inserts parameter `idx` once per graph; frozen parameters do not require gradients.
    pub fn param(&mut self, params: &ParameterSet<T>, idx: usize) -> Var {
        if let Some(&v) = self.params.get(&idx) {
            return v;
        }
        let p = params.get(idx);
        let requires_grad = self.tracking && p.trainable;
        self.nodes.push(Node { value: p.value.clone(), op: Op::Param(idx), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(idx, v);
        v
    }

    /// `a [..., k] x b [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.cols();
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(bv.shape()[0], k, "matmul inner dimensions {:?} x {:?}", av.shape(), bv.shape());
        let n = bv.shape()[1];
        let m = av.rows();
        let data = mm(av.data(), bv.data(), m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), &[a, b])
    }

    /// Adds `b [n]` to every row of `x [..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        assert_eq!(bv.numel(), n, "bias length");
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddBias(x, b), &[x, b])
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let value = Tensor::from_parts(av.shape().to_vec(), zip_map(av.data(), bv.data(), f));
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_parts(xv.shape().to_vec(), map(xv.data(), f));
        self.push(value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, loss::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Columns `[start, start + len)` of the last dimension.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        assert!(start + len <= n, "column slice out of range");
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::from_parts(shape, data), Op::Cols { x, start }, &[x])
    }

    /// Step `t` of a `[B, W, C]` sequence as `[B, C]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Var {
        let xv = self.value(x);
        let (b, w, c) = dims3(xv.shape());
        assert!(t < w, "time index out of range");
        let mut data = Vec::with_capacity(b * c);
        for bi in 0..b {
            let off = (bi * w + t) * c;
            data.extend_from_slice(&xv.data()[off..off + c]);
        }
        self.push(Tensor::from_parts(vec![b, c], data), Op::TimeStep { x, t }, &[x])
    }

    /// Stacks `W` tensors of shape `[B, C]` into `[B, W, C]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        let first = self.value(steps[0]);
        let (b, c) = (first.shape()[0], first.shape()[1]);
        let w = steps.len();
        let mut data = vec![T::zero(); b * w * c];
        for (t, s) in steps.iter().enumerate() {
            let sv = self.value(*s);
            assert_eq!(sv.shape(), [b, c], "stack_time shapes");
            for bi in 0..b {
                let dst = (bi * w + t) * c;
                data[dst..dst + c].copy_from_slice(&sv.data()[bi * c..(bi + 1) * c]);
            }
        }
        self.push(Tensor::from_parts(vec![b, w, c], data), Op::StackTime(steps.to_vec()), steps)
    }

    /// Concatenates along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat rows");
        let (na, nb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks_exact(na).zip(bv.data().chunks_exact(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = na + nb;
        self.push(Tensor::from_parts(shape, data), Op::Concat(a, b), &[a, b])
    }

    /// 1-D convolution over time, stride one.
    ///
    /// `x [B, W, Cin]`, `w [K, Cin, Cout]`, `b [Cout]`; output `[B, W, Cout]`
    /// with `out[t] = b + sum_j x[t + j*dilation - pad_left] w[j]` and zeros
    /// outside the sequence. `pad_left = (K-1)/2` gives "same" padding,
    /// `pad_left = (K-1)*dilation` a causal convolution.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize, pad_left: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (bs, len, cin) = dims3(xv.shape());
        let (k, wcin, cout) = dims3(wv.shape());
        assert_eq!(cin, wcin, "conv input channels");
        assert_eq!(bv.numel(), cout, "conv bias length");
        let mut out = vec![T::zero(); bs * len * cout];
        for bi in 0..bs {
            for t in 0..len {
                let orow = &mut out[(bi * len + t) * cout..(bi * len + t + 1) * cout];
                orow.copy_from_slice(bv.data());
                for j in 0..k {
                    let src = t + j * dilation;
                    if src < pad_left || src - pad_left >= len {
                        continue;
                    }
                    let s = src - pad_left;
                    let xrow = &xv.data()[(bi * len + s) * cin..(bi * len + s + 1) * cin];
                    let wk = &wv.data()[j * cin * cout..(j + 1) * cin * cout];
                    for (&xval, wrow) in xrow.iter().zip(wk.chunks_exact(cout)) {
                        for (o, &wval) in orow.iter_mut().zip(wrow) {
                            *o += xval * wval;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![bs, len, cout], out);
        self.push(value, Op::Conv1d { x, w, b, dilation, pad_left }, &[x, w, b])
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        assert!(gv.numel() == n && bv.numel() == n, "layer norm parameter length");
        let nf = T::from_usize(n).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for ((&v, &g), &bb) in row.iter().zip(gv.data()).zip(bv.data()) {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g + bb);
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Mean over the time axis: `[B, W, C] -> [B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, w, c) = dims3(xv.shape());
        let wf = T::from_usize(w).unwrap();
        let mut data = vec![T::zero(); b * c];
        for bi in 0..b {
            let o = &mut data[bi * c..(bi + 1) * c];
            for row in xv.data()[bi * w * c..(bi + 1) * w * c].chunks_exact(c) {
                for (a, &v) in o.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in o.iter_mut() {
                *a /= wf;
            }
        }
        self.push(Tensor::from_parts(vec![b, c], data), Op::MeanTime(x), &[x])
    }

    /// Mean of every element, as a one-element tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.numel()).unwrap();
        let s = xv.data().iter().copied().fold(T::zero(), |a, b| a + b) / n;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Adds a constant `[W, C]` tensor to every batch item of `x [B, W, C]`.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let xv = self.value(x);
        let per = c.numel();
        assert_eq!(xv.numel() % per, 0, "constant does not tile input");
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_exact_mut(per) {
            for (o, &v) in chunk.iter_mut().zip(c.data()) {
                *o += v;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddConst(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention core.
    /// `q, k, v` are `[B, W, D]`; head `h` uses columns `h*D/heads ..`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, w, d) = dims3(qv.shape());
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); b * heads * w * w];
        let mut out = vec![T::zero(); b * w * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * w * w..(bi * heads + h + 1) * w * w];
                for i in 0..w {
                    let qi = &qd[(bi * w + i) * d + h * dh..(bi * w + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * w..(i + 1) * w];
                    let mut mx = T::neg_infinity();
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(bi * w + j) * d + h * dh..(bi * w + j) * d + (h + 1) * dh];
                        let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                        *pj = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for pj in prow.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= z;
                    }
                    let orow = &mut out[(bi * w + i) * d + h * dh..(bi * w + i) * d + (h + 1) * dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(bi * w + j) * d + h * dh..(bi * w + j) * d + (h + 1) * dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, w, d], out);
        self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Mean binary loss of `logits` (any shape with one logit per sample).
    pub fn loss(&mut self, logits: Var, labels: &[T], kind: LossKind) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.numel(), labels.len(), "one label per logit");
        let value = loss::loss_value(kind, zv.data(), labels);
        self.push(Tensor::scalar(value), Op::Loss { logits, labels: labels.to_vec(), kind }, &[logits])
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Internal("backward called on a node that was never computed".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => {
                    out.grads.insert(*idx, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (k, n) = (bv.shape()[0], bv.shape()[1]);
                    if self.needs(*a) {
                        let da = mm_bt(g.data(), bv.data(), k, n);
                        self.acc(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = mm_at(av.data(), g.data(), k, n);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let n = g.cols();
                        let mut db = vec![T::zero(); n];
                        for row in g.data().chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *b, db);
                    }
                    if self.needs(*x) {
                        self.acc(&mut grads, *x, g.into_data());
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.data().to_vec());
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.into_data());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, map(g.data(), |v| -v));
                    }
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.into_data());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, zip_map(g.data(), bv.data(), |x, y| x * y));
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, zip_map(g.data(), av.data(), |x, y| x * y));
                    }
                }
                Op::Sigmoid(x) => {
                    let d = zip_map(g.data(), node.value.data(), |gv, y| gv * y * (T::one() - y));
                    self.acc(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = zip_map(g.data(), node.value.data(), |gv, y| gv * (T::one() - y * y));
                    self.acc(&mut grads, *x, d);
                }
                Op::Relu(x) => {
                    let d = zip_map(g.data(), node.value.data(), |gv, y| if y > T::zero() { gv } else { T::zero() });
                    self.acc(&mut grads, *x, d);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut grads, *x, map(g.data(), |v| v * c));
                }
                Op::Cols { x, start } => {
                    let xv = self.value(*x);
                    let (n, len) = (xv.cols(), g.cols());
                    let mut d = vec![T::zero(); xv.numel()];
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.data().chunks_exact(len)) {
                        drow[*start..*start + len].copy_from_slice(grow);
                    }
                    self.acc(&mut grads, *x, d);
                }
                Op::TimeStep { x, t } => {
                    let xv = self.value(*x);
                    let (b, w, c) = dims3(xv.shape());
                    let mut d = vec![T::zero(); xv.numel()];
                    for bi in 0..b {
                        let off = (bi * w + t) * c;
                        d[off..off + c].copy_from_slice(&g.data()[bi * c..(bi + 1) * c]);
                    }
                    self.acc(&mut grads, *x, d);
                }
                Op::StackTime(steps) => {
                    let (b, w, c) = dims3(g.shape());
                    for (t, s) in steps.iter().enumerate() {
                        if !self.needs(*s) {
                            continue;
                        }
                        let mut d = Vec::with_capacity(b * c);
                        for bi in 0..b {
                            let off = (bi * w + t) * c;
                            d.extend_from_slice(&g.data()[off..off + c]);
                        }
                        self.acc(&mut grads, *s, d);
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).cols();
                    let nb = self.value(*b).cols();
                    let mut da = Vec::with_capacity(self.value(*a).numel());
                    let mut db = Vec::with_capacity(self.value(*b).numel());
                    for row in g.data().chunks_exact(na + nb) {
                        da.extend_from_slice(&row[..na]);
                        db.extend_from_slice(&row[na..]);
                    }
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Conv1d { x, w, b, dilation, pad_left } => {
                    self.conv1d_backward(&mut grads, &g, *x, *w, *b, *dilation, *pad_left);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = g.cols();
                    let gv = self.value(*gain);
                    if self.needs(*gain) {
                        let mut dg = vec![T::zero(); n];
                        for (grow, hrow) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for ((d, &gg), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                                *d += gg * h;
                            }
                        }
                        self.acc(&mut grads, *gain, dg);
                    }
                    if self.needs(*bias) {
                        let mut db = vec![T::zero(); n];
                        for grow in g.data().chunks_exact(n) {
                            for (d, &gg) in db.iter_mut().zip(grow) {
                                *d += gg;
                            }
                        }
                        self.acc(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        let nf = T::from_usize(n).unwrap();
                        let mut dx = Vec::with_capacity(g.numel());
                        let mut dxhat = vec![T::zero(); n];
                        for ((grow, hrow), &is) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)).zip(inv_std) {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for i in 0..n {
                                dxhat[i] = grow[i] * gv.data()[i];
                                s1 += dxhat[i];
                                s2 += dxhat[i] * hrow[i];
                            }
                            for i in 0..n {
                                dx.push(is / nf * (nf * dxhat[i] - s1 - hrow[i] * s2));
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::MeanTime(x) => {
                    let (b, w, c) = dims3(self.value(*x).shape());
                    let wf = T::from_usize(w).unwrap();
                    let mut d = Vec::with_capacity(b * w * c);
                    for bi in 0..b {
                        let grow = &g.data()[bi * c..(bi + 1) * c];
                        for _ in 0..w {
                            d.extend(grow.iter().map(|&v| v / wf));
                        }
                    }
                    self.acc(&mut grads, *x, d);
                }
                Op::MeanAll(x) => {
                    let numel = self.value(*x).numel();
                    let v = g.item() / T::from_usize(numel).unwrap();
                    self.acc(&mut grads, *x, vec![v; numel]);
                }
                Op::AddConst(x) => {
                    self.acc(&mut grads, *x, g.into_data());
                }
                Op::Attention { q, k, v, heads, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs);
                }
                Op::Loss { logits, labels, kind } => {
                    let z = self.value(*logits);
                    let scale = g.item();
                    let d = map(&loss::loss_grad(*kind, z.data(), labels), |v| v * scale);
                    self.acc(&mut grads, *logits, d);
                }
            }
        }
        Ok(out)
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&d) {
                    *a += *b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
        pad_left: usize,
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bs, len, cin) = dims3(xv.shape());
        let (k, _, cout) = dims3(wv.shape());
        let gd = g.data();
        if self.needs(b) {
            let mut db = vec![T::zero(); cout];
            for row in gd.chunks_exact(cout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            self.acc(grads, b, db);
        }
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        if !need_x && !need_w {
            return;
        }
        let mut dx = if need_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
        // [K, Cout, Cin] so the input-gradient update runs along contiguous memory
        let wt: Vec<T> = if need_x {
            wv.data().chunks_exact(cin * cout).flat_map(|wk| transpose(wk, cin, cout)).collect()
        } else {
            Vec::new()
        };
        let mut dw = if need_w { vec![T::zero(); wv.numel()] } else { Vec::new() };
        for bi in 0..bs {
            for t in 0..len {
                let grow = &gd[(bi * len + t) * cout..(bi * len + t + 1) * cout];
                for j in 0..k {
                    let src = t + j * dilation;
                    if src < pad_left || src - pad_left >= len {
                        continue;
                    }
                    let s = src - pad_left;
                    let xoff = (bi * len + s) * cin;
                    if need_x {
                        let wk = &wt[j * cin * cout..(j + 1) * cin * cout];
                        let dxrow = &mut dx[xoff..xoff + cin];
                        for (&gg, wrow) in grow.iter().zip(wk.chunks_exact(cin)) {
                            if gg == T::zero() {
                                continue;
                            }
                            for (d, &ww) in dxrow.iter_mut().zip(wrow) {
                                *d += gg * ww;
                            }
                        }
                    }
                    if need_w {
                        let xrow = &xv.data()[xoff..xoff + cin];
                        let dwk = &mut dw[j * cin * cout..(j + 1) * cin * cout];
                        for (&xval, dwrow) in xrow.iter().zip(dwk.chunks_exact_mut(cout)) {
                            if xval == T::zero() {
                                continue;
                            }
                            for (d, &gg) in dwrow.iter_mut().zip(grow) {
                                *d += xval * gg;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.acc(grads, x, dx);
        }
        if need_w {
            self.acc(grads, w, dw);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, w, d) = dims3(qv.shape());
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dq = vec![T::zero(); qv.numel()];
        let mut dk = vec![T::zero(); kv.numel()];
        let mut dv = vec![T::zero(); vv.numel()];
        let mut dp = vec![T::zero(); w];
        let col = |bi: usize, i: usize, h: usize| (bi * w + i) * d + h * dh;
        for bi in 0..b {
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * w * w..(bi * heads + h + 1) * w * w];
                for i in 0..w {
                    let gi = &gd[col(bi, i, h)..col(bi, i, h) + dh];
                    let prow = &p[i * w..(i + 1) * w];
                    // dV[j] += p[i, j] g[i]; dP[i, j] = g[i] . v[j]
                    for j in 0..w {
                        let vj = &vd[col(bi, j, h)..col(bi, j, h) + dh];
                        dp[j] = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        let dvj = &mut dv[col(bi, j, h)..col(bi, j, h) + dh];
                        for (o, &gg) in dvj.iter_mut().zip(gi) {
                            *o += prow[j] * gg;
                        }
                    }
                    let dot = prow.iter().zip(&dp).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    let qi_off = col(bi, i, h);
                    for j in 0..w {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj_off = col(bi, j, h);
                        for c in 0..dh {
                            dq[qi_off + c] += ds * kd[kj_off + c];
                            dk[kj_off + c] += ds * qd[qi_off + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, dq);
        self.acc(grads, k, dk);
        self.acc(grads, v, dv);
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a 3-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}
