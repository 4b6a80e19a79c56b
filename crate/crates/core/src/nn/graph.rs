//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value plus whatever the
//! backward rule needs (layer-norm statistics, softmax probabilities, dropout
//! masks). [`Graph::backward`] walks the tape once in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Float, Mat, MatMut, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Scalars copied across [`Graph::boundary`] nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Traffic {
    pub forward: u64,
    pub backward: u64,
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Gather { table: Var, idx: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<T> },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    Interleave { parts: Vec<Var> },
    TakeStrided { x: Var, offset: usize, stride: usize },
    MaskedMse { pred: Var, target: Vec<T>, mask: Vec<bool>, count: usize },
    Boundary(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Gelu(a) | Op::Sigmoid(a) => {
                vec![*a]
            }
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Dropout { x, .. } => vec![*x],
            Op::Attention { qkv, .. } => vec![*qkv],
            Op::Interleave { parts } => parts.clone(),
            Op::TakeStrided { x, .. } => vec![*x],
            Op::MaskedMse { pred, .. } => vec![*pred],
            Op::Boundary(_) => vec![],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    training: bool,
    dropout_rng: ChaCha8Rng,
    traffic: Traffic,
    backward_done: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    /// An evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
            traffic: Traffic::default(),
            backward_done: false,
        }
    }

    /// A training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph { training: true, dropout_rng: ChaCha8Rng::seed_from_u64(seed), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn traffic(&self) -> Traffic {
        self.traffic
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.backward_done {
            return Err(Error::usage("graph already consumed by backward"));
        }
        Ok(())
    }

    /// `x·w + b` over the trailing axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_open()?;
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::shape(format!("linear: input {:?} vs weight {:?}", xv.shape(), wv.shape())));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape(format!("linear: bias {:?} for output {}", self.value(b).shape(), dout)));
            }
        }
        let rows = xv.len() / din;
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            Mat::row_major(xv.data(), rows, din),
            Mat::row_major(wv.data(), din, dout),
            beta,
            MatMut::row_major(&mut out, rows, dout),
        );
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).map(|v| v * s);
        Ok(self.push(out, Op::Scale(a, s)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let s: T = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Row lookup into a `[rows, dim]` table; output is `[idx.len(), dim]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.check_open()?;
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("gather: table must be rank 2"));
        }
        let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather: index {bad} >= table rows {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            out.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::from_vec(&[idx.len(), dim], out)?;
        Ok(self.push(value, Op::Gather { table, idx: idx.to_vec() }))
    }

    /// Layer normalization over the trailing axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape(format!("layer_norm: affine params must be [{d}]")));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dt = T::from_usize(d).unwrap();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            let o = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                o[i] = (row[i] - mu) * rs * g[i] + b[i];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, mean, rstd }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(x).map(|v| {
            let (_, t) = gelu_parts(v);
            T::lit(0.5) * v * (T::one() + t)
        });
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(x).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    /// Inverted dropout; identity (no node) in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.check_open()?;
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {p} must be < 1")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> =
            (0..n).map(|_| if self.dropout_rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Multi-head causal self-attention over a packed `[B, T, 3H]` projection.
    ///
    /// `key_mask[b*T + j] == false` hides position `j` of sequence `b` from every
    /// query. A query with no visible key produces a zero row.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        self.check_open()?;
        let qv = self.value(qkv);
        if qv.rank() != 3 || !qv.shape()[2].is_multiple_of(3) {
            return Err(Error::shape(format!("attention: qkv shape {:?}", qv.shape())));
        }
        let (bsz, seq, h3) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let hidden = h3 / 3;
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::shape(format!("attention: {hidden} not divisible by {heads} heads")));
        }
        if let Some(m) = key_mask {
            if m.len() != bsz * seq {
                return Err(Error::shape("attention: key mask length"));
            }
        }
        let hd = hidden / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut out = vec![T::zero(); bsz * seq * hidden];
        let mut probs = vec![T::zero(); bsz * heads * seq * seq];
        let q = qv.data();
        for b in 0..bsz {
            let base = b * seq * h3;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let qm = strided(&q[base + h * hd..], seq, hd, h3);
                let km = strided(&q[base + hidden + h * hd..], seq, hd, h3);
                gemm(qm, km.t(), T::zero(), MatMut::row_major(p, seq, seq));
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let visible = |j: usize| j <= i && key_mask.is_none_or(|m| m[b * seq + j]);
                    let mut max = T::neg_infinity();
                    for (j, &s) in row.iter().enumerate() {
                        if visible(j) && s > max {
                            max = s;
                        }
                    }
                    if max == T::neg_infinity() {
                        row.fill(T::zero());
                        continue;
                    }
                    let mut total = T::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if visible(j) { ((*s - max) * scale).exp() } else { T::zero() };
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                let vm = strided(&q[base + 2 * hidden + h * hd..], seq, hd, h3);
                let dst = &mut out[b * seq * hidden + h * hd..];
                gemm(
                    Mat::row_major(p, seq, seq),
                    vm,
                    T::zero(),
                    MatMut { data: dst, rows: seq, cols: hd, rs: hidden, cs: 1 },
                );
            }
        }
        let value = Tensor::from_vec(&[bsz, seq, hidden], out)?;
        Ok(self.push(value, Op::Attention { qkv, heads, probs }))
    }

    /// Interleaves `k` tensors of shape `[B, L, H]` into `[B, k·L, H]` so that
    /// output position `l·k + j` holds `parts[j][l]`.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_open()?;
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 3 || parts.iter().any(|&p| self.value(p).shape() != first.as_slice()) {
            return Err(Error::shape("interleave: parts must share a rank-3 shape"));
        }
        let (bsz, len, dim, k) = (first[0], first[1], first[2], parts.len());
        let mut out = vec![T::zero(); bsz * len * k * dim];
        for (j, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for b in 0..bsz {
                for l in 0..len {
                    let s = (b * len + l) * dim;
                    let d = (b * len * k + l * k + j) * dim;
                    out[d..d + dim].copy_from_slice(&src[s..s + dim]);
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, len * k, dim], out)?;
        Ok(self.push(value, Op::Interleave { parts: parts.to_vec() }))
    }

    /// Selects positions `offset, offset+stride, ...` along axis 1 of `[B, S, H]`.
    pub fn take_strided(&mut self, x: Var, offset: usize, stride: usize) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        if xv.rank() != 3 || stride == 0 || offset >= stride || !xv.shape()[1].is_multiple_of(stride) {
            return Err(Error::shape(format!(
                "take_strided: shape {:?}, offset {offset}, stride {stride}",
                xv.shape()
            )));
        }
        let (bsz, seq, dim) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let len = seq / stride;
        let mut out = Vec::with_capacity(bsz * len * dim);
        for b in 0..bsz {
            for l in 0..len {
                let s = (b * seq + l * stride + offset) * dim;
                out.extend_from_slice(&xv.data()[s..s + dim]);
            }
        }
        let value = Tensor::from_vec(&[bsz, len, dim], out)?;
        Ok(self.push(value, Op::TakeStrided { x, offset, stride }))
    }

    /// Mean squared error over the rows of `pred` whose mask entry is set.
    ///
    /// `pred` is viewed as `[mask.len(), D]`; an all-false mask yields zero loss.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        self.check_open()?;
        let pv = self.value(pred);
        if pv.shape() != target.shape() || mask.is_empty() || !pv.len().is_multiple_of(mask.len()) {
            return Err(Error::shape(format!(
                "masked_mse: pred {:?}, target {:?}, mask {}",
                pv.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let dim = pv.len() / mask.len();
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = T::zero();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for i in r * dim..(r + 1) * dim {
                    let e = pv.data()[i] - target.data()[i];
                    total += e * e;
                }
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_usize(count * dim).unwrap() };
        let op = Op::MaskedMse { pred, target: target.data().to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Copies `x` across a party boundary. The copy is a fresh leaf that always
    /// carries a gradient, so the receiving side returns one on backward; both
    /// directions are tallied in [`Graph::traffic`].
    pub fn boundary(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let value = self.value(x).clone();
        self.traffic.forward += value.len() as u64;
        self.nodes.push(Node { value, grad: None, requires_grad: true, op: Op::Boundary(x) });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("backward on a variable not produced by this graph"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage("backward needs a scalar; use backward_with"));
        }
        self.backward_with(loss, Tensor::full(&[1], T::one()))
    }

    /// Backpropagates an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, grad: Tensor<T>) -> Result<()> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(Error::usage("backward without a recorded forward pass"));
        }
        self.check_open()?;
        if grad.shape() != self.nodes[out.0].value.shape() {
            return Err(Error::shape("upstream gradient shape"));
        }
        self.backward_done = true;
        self.nodes[out.0].grad = Some(grad);
        for i in (0..=out.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else { continue };
            backprop_node(before, node, g, &mut self.traffic);
        }
        Ok(())
    }
}

fn strided<T>(data: &[T], rows: usize, cols: usize, rs: usize) -> Mat<'_, T> {
    Mat { data, rows, cols, rs, cs: 1 }
}

fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Returns `(inner, tanh(inner))` for the GELU tanh approximation.
fn gelu_parts<T: Float>(v: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (v + T::lit(0.044715) * v * v * v);
    (inner, inner.fast_tanh())
}

/// The gradient buffer of `idx`, created as zeros on first use.
fn take_buf<T: Float>(nodes: &mut [Node<T>], idx: Var) -> Tensor<T> {
    let n = &mut nodes[idx.0];
    n.grad.take().unwrap_or_else(|| Tensor::zeros(n.value.shape()))
}

fn accumulate<T: Float>(nodes: &mut [Node<T>], idx: Var, t: Tensor<T>) {
    let n = &mut nodes[idx.0];
    match n.grad.as_mut() {
        Some(g) => g.add_assign(&t),
        None => n.grad = Some(t),
    }
}

fn wants<T: Float>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop_node<T: Float>(before: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>, traffic: &mut Traffic) {
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let din = before[w.0].value.shape()[0];
            let dout = before[w.0].value.shape()[1];
            let rows = g.len() / dout;
            let gm = Mat::row_major(g.data(), rows, dout);
            if wants(before, *x) {
                let mut dx = take_buf(before, *x);
                gemm(
                    gm,
                    Mat::row_major(before[w.0].value.data(), din, dout).t(),
                    T::one(),
                    MatMut::row_major(dx.data_mut(), rows, din),
                );
                before[x.0].grad = Some(dx);
            }
            if wants(before, *w) {
                let mut dw = take_buf(before, *w);
                gemm(
                    Mat::row_major(before[x.0].value.data(), rows, din).t(),
                    gm,
                    T::one(),
                    MatMut::row_major(dw.data_mut(), din, dout),
                );
                before[w.0].grad = Some(dw);
            }
            if let Some(b) = b {
                if wants(before, *b) {
                    let mut db = take_buf(before, *b);
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    before[b.0].grad = Some(db);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if wants(before, *v) {
                    accumulate(before, *v, g.clone());
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (before[a.0].value.clone(), before[b.0].value.clone());
            if wants(before, *a) {
                let d = g.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                accumulate(before, *a, Tensor::from_vec(g.shape(), d).unwrap());
            }
            if wants(before, *b) {
                let d = g.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                accumulate(before, *b, Tensor::from_vec(g.shape(), d).unwrap());
            }
        }
        Op::Scale(a, s) => {
            if wants(before, *a) {
                let s = *s;
                accumulate(before, *a, g.map(|v| v * s));
            }
        }
        Op::Sum(a) => {
            if wants(before, *a) {
                let shape = before[a.0].value.shape().to_vec();
                accumulate(before, *a, Tensor::full(&shape, g.item()));
            }
        }
        Op::Reshape(a) => {
            if wants(before, *a) {
                let shape = before[a.0].value.shape().to_vec();
                accumulate(before, *a, g.clone().reshape(&shape).unwrap());
            }
        }
        Op::Gather { table, idx } => {
            if wants(before, *table) {
                let dim = g.last_dim();
                let mut dt = take_buf(before, *table);
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * dim..(r + 1) * dim];
                    for (d, &v) in dt.data_mut()[i * dim..(i + 1) * dim].iter_mut().zip(src) {
                        *d += v;
                    }
                }
                before[table.0].grad = Some(dt);
            }
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let d = g.last_dim();
            let dt = T::from_usize(d).unwrap();
            let xv = &before[x.0].value;
            let gv = before[gain.0].value.data().to_vec();
            let mut dx = vec![T::zero(); xv.len()];
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            for (r, (xrow, grow)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for i in 0..d {
                    let xhat = (xrow[i] - mu) * rs;
                    let dxhat = grow[i] * gv[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgain[i] += grow[i] * xhat;
                    dbias[i] += grow[i];
                }
                let (m1, m2) = (sum_dxhat / dt, sum_dxhat_xhat / dt);
                let out = &mut dx[r * d..(r + 1) * d];
                for i in 0..d {
                    let xhat = (xrow[i] - mu) * rs;
                    out[i] = rs * (grow[i] * gv[i] - m1 - xhat * m2);
                }
            }
            let shape = xv.shape().to_vec();
            if wants(before, *x) {
                accumulate(before, *x, Tensor::from_vec(&shape, dx).unwrap());
            }
            if wants(before, *gain) {
                accumulate(before, *gain, Tensor::from_vec(&[d], dgain).unwrap());
            }
            if wants(before, *bias) {
                accumulate(before, *bias, Tensor::from_vec(&[d], dbias).unwrap());
            }
        }
        Op::Gelu(x) => {
            if wants(before, *x) {
                let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let half = T::lit(0.5);
                let k3 = T::lit(3.0 * 0.044715);
                let xv = &before[x.0].value;
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let (_, t) = gelu_parts(v);
                        let dinner = c * (T::one() + k3 * v * v);
                        gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * dinner)
                    })
                    .collect();
                let t = Tensor::from_vec(xv.shape(), d).unwrap();
                accumulate(before, *x, t);
            }
        }
        Op::Sigmoid(x) => {
            if wants(before, *x) {
                let d = node.value.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                accumulate(before, *x, Tensor::from_vec(g.shape(), d).unwrap());
            }
        }
        Op::Dropout { x, mask } => {
            if wants(before, *x) {
                let d = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(before, *x, Tensor::from_vec(g.shape(), d).unwrap());
            }
        }
        Op::Attention { qkv, heads, probs } => {
            if !wants(before, *qkv) {
                return;
            }
            let shape = before[qkv.0].value.shape().to_vec();
            let (bsz, seq, h3) = (shape[0], shape[1], shape[2]);
            let hidden = h3 / 3;
            let hd = hidden / heads;
            let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
            let mut dqkv = take_buf(before, *qkv);
            let q = before[qkv.0].value.data();
            let mut dp = vec![T::zero(); seq * seq];
            for b in 0..bsz {
                let base = b * seq * h3;
                let gbase = b * seq * hidden;
                for h in 0..*heads {
                    let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    let pm = Mat::row_major(p, seq, seq);
                    let dout = strided(&g.data()[gbase + h * hd..], seq, hd, hidden);
                    let vm = strided(&q[base + 2 * hidden + h * hd..], seq, hd, h3);
                    // dV += Pᵀ·dO
                    gemm(
                        pm.t(),
                        dout,
                        T::one(),
                        MatMut {
                            data: &mut dqkv.data_mut()[base + 2 * hidden + h * hd..],
                            rows: seq,
                            cols: hd,
                            rs: h3,
                            cs: 1,
                        },
                    );
                    // dP = dO·Vᵀ, then the softmax Jacobian.
                    gemm(dout, vm.t(), T::zero(), MatMut::row_major(&mut dp, seq, seq));
                    for i in 0..seq {
                        let prow = &p[i * seq..(i + 1) * seq];
                        let drow = &mut dp[i * seq..(i + 1) * seq];
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..seq {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                    }
                    let dsm = Mat::row_major(&dp, seq, seq);
                    let qm = strided(&q[base + h * hd..], seq, hd, h3);
                    let km = strided(&q[base + hidden + h * hd..], seq, hd, h3);
                    // dQ += dS·K ; dK += dSᵀ·Q
                    gemm(
                        dsm,
                        km,
                        T::one(),
                        MatMut { data: &mut dqkv.data_mut()[base + h * hd..], rows: seq, cols: hd, rs: h3, cs: 1 },
                    );
                    gemm(
                        dsm.t(),
                        qm,
                        T::one(),
                        MatMut {
                            data: &mut dqkv.data_mut()[base + hidden + h * hd..],
                            rows: seq,
                            cols: hd,
                            rs: h3,
                            cs: 1,
                        },
                    );
                }
            }
            before[qkv.0].grad = Some(dqkv);
        }
        Op::Interleave { parts } => {
            let k = parts.len();
            let dim = g.last_dim();
            for (j, &p) in parts.iter().enumerate() {
                if !wants(before, p) {
                    continue;
                }
                let shape = before[p.0].value.shape().to_vec();
                let (bsz, len) = (shape[0], shape[1]);
                let mut d = vec![T::zero(); bsz * len * dim];
                for b in 0..bsz {
                    for l in 0..len {
                        let s = (b * len * k + l * k + j) * dim;
                        let t = (b * len + l) * dim;
                        d[t..t + dim].copy_from_slice(&g.data()[s..s + dim]);
                    }
                }
                accumulate(before, p, Tensor::from_vec(&shape, d).unwrap());
            }
        }
        Op::TakeStrided { x, offset, stride } => {
            if wants(before, *x) {
                let shape = before[x.0].value.shape().to_vec();
                let (bsz, seq, dim) = (shape[0], shape[1], shape[2]);
                let len = seq / stride;
                let mut dx = take_buf(before, *x);
                for b in 0..bsz {
                    for l in 0..len {
                        let s = (b * len + l) * dim;
                        let t = (b * seq + l * stride + offset) * dim;
                        for (d, &v) in dx.data_mut()[t..t + dim].iter_mut().zip(&g.data()[s..s + dim]) {
                            *d += v;
                        }
                    }
                }
                before[x.0].grad = Some(dx);
            }
        }
        Op::MaskedMse { pred, target, mask, count } => {
            if !wants(before, *pred) || *count == 0 {
                return;
            }
            let pv = &before[pred.0].value;
            let dim = pv.len() / mask.len();
            let coef = T::lit(2.0) * g.item() / T::from_usize(count * dim).unwrap();
            let mut d = vec![T::zero(); pv.len()];
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    for i in r * dim..(r + 1) * dim {
                        d[i] = coef * (pv.data()[i] - target[i]);
                    }
                }
            }
            let shape = pv.shape().to_vec();
            accumulate(before, *pred, Tensor::from_vec(&shape, d).unwrap());
        }
        Op::Boundary(x) => {
            traffic.backward += g.len() as u64;
            if wants(before, *x) {
                accumulate(before, *x, g.clone());
            }
        }
    }
}
