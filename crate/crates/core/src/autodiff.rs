//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! replays the tape in reverse. Nodes whose inputs carry no gradient skip
//! their backward pass entirely, so frozen sub-networks cost nothing.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PadMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Square(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddRowBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2(Var),
    ConcatChannels(Vec<Var>),
    ChannelNorm { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Rc<Vec<Option<usize>>> },
    Gather { table: Var, indices: Rc<Vec<usize>> },
    NchwToRows(Var),
    RowsToNchw(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (stop-gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(ta.shape(), data)?, self.ng(a) || self.ng(b)))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a fixed buffer of the same length.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() != c.len() {
            return Err(Error::shape("mul_const", format!("{} vs {}", ta.numel(), c.len())));
        }
        let data = ta.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst(a, c), ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        let ng = self.ng(a);
        self.push(t, Op::Abs(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.unary(a, |x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(t, Op::LeakyRelu(a, slope), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::gelu);
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::softplus);
        let ng = self.ng(a);
        self.push(t, Op::Softplus(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `[m, k] x [k, n]`; leading dims of `a` are flattened into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 {
            return Err(Error::shape("matmul", format!("rhs must be 2-D, got {:?}", tb.shape())));
        }
        let (k, n) = (tb.shape()[0], tb.shape()[1]);
        let sa = ta.shape();
        if *sa.last().unwrap() != k {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, tb.shape())));
        }
        let m = ta.numel() / k;
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap();
        if tb.numel() != n {
            return Err(Error::shape("add_row_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddRowBias { x, bias }, ng))
    }

    /// 2-D cross-correlation. `x: [n, c, h, w]`, `w: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 4 || tw.shape().len() != 4 {
            return Err(Error::shape("conv2d", format!("{:?} * {:?}", tx.shape(), tw.shape())));
        }
        let [n, c, h, wd] = tx.dims4();
        let [o, wc, kh, kw] = tw.dims4();
        if wc != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels, kernel expects {wc}")));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}")));
        }
        if mode == PadMode::CircularWidth && pad > wd {
            return Err(Error::shape("conv2d", "circular pad wider than input"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(Error::shape("conv2d", "bias length"));
            }
        }
        let geom = ConvGeom { n, c, h, w: wd, o, kh, kw, stride, pad, mode };
        let padded = kernels::pad_input(tx.data(), &geom);
        let out = kernels::conv2d_forward(&padded, tw.data(), b.map(|b| self.value(b).data()), &geom);
        let t = Tensor::new(&[n, o, geom.out_h(), geom.out_w()], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 4 {
            return Err(Error::shape("upsample2", format!("{:?}", tx.shape())));
        }
        let [n, c, h, w] = tx.dims4();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = tx.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Upsample2(x), ng))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims4();
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut ctot = 0;
        for &x in xs {
            let d = self.value(x).dims4();
            if self.value(x).shape().len() != 4 || d[0] != n || d[2] != h || d[3] != w {
                return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", d, first)));
            }
            ctot += d[1];
        }
        let mut out = Vec::with_capacity(n * ctot * h * w);
        for b in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.dims4()[1];
                out.extend_from_slice(&t.data()[b * c * h * w..(b + 1) * c * h * w]);
            }
        }
        let t = Tensor::new(&[n, ctot, h, w], out)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(t, Op::ConcatChannels(xs.to_vec()), ng))
    }

    /// Scales each spatial feature vector of `[n, c, h, w]` to unit length.
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 4 {
            return Err(Error::shape("channel_norm", format!("{:?}", tx.shape())));
        }
        let [n, c, h, w] = tx.dims4();
        let hw = h * w;
        let mut norms = vec![0.0; n * hw];
        let mut out = vec![0.0; tx.numel()];
        for b in 0..n {
            for p in 0..hw {
                let mut s = 0.0;
                for ch in 0..c {
                    let v = tx.data()[(b * c + ch) * hw + p];
                    s += v * v;
                }
                let nv = (s + eps).sqrt();
                norms[b * hw + p] = nv;
                for ch in 0..c {
                    let i = (b * c + ch) * hw + p;
                    out[i] = tx.data()[i] / nv;
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::ChannelNorm { x, norms }, ng))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", "affine params must match last dim"));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; tx.numel()];
        let mut stats = Vec::with_capacity(tx.numel() / d);
        for (row, orow) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            stats.push(kernels::layer_norm_row(row, g, bt, eps, orow));
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, stats }, ng))
    }

    /// Causal multi-head attention core: `softmax(q k^T / sqrt(dh)) v` with
    /// position `i` attending to positions `<= i`. Shapes `[b, t, d]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let tq = self.value(q);
        same_shape("attention", tq, self.value(k))?;
        same_shape("attention", tq, self.value(v))?;
        if tq.shape().len() != 3 || heads == 0 || tq.shape()[2] % heads != 0 {
            return Err(Error::shape("attention", format!("{:?} with {heads} heads", tq.shape())));
        }
        let (b, t, d) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        let dh = d / heads;
        let (qd, kd, vd) = (tq.data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            let base = bi * t * d;
            let keys = &kd[base..base + t * d];
            let vals = &vd[base..base + t * d];
            for hd in 0..heads {
                for i in 0..t {
                    let prow = &mut probs[((bi * heads + hd) * t + i) * t..((bi * heads + hd) * t + i + 1) * t];
                    let qrow = &qd[base + i * d + hd * dh..base + i * d + (hd + 1) * dh];
                    let orow = &mut out[base + i * d + hd * dh..base + i * d + (hd + 1) * dh];
                    kernels::attend_row(qrow, keys, vals, d, hd * dh, 0, i + 1, prow, orow);
                }
            }
        }
        let tt = Tensor::new(&[b, t, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(tt, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Mean softmax cross-entropy over rows of `logits[.., k]` whose target
    /// is `Some`. Rows with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let tl = self.value(logits);
        let k = *tl.shape().last().unwrap();
        let rows = tl.numel() / k;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, t) in tl.data().chunks(k).zip(targets.iter()) {
            if let Some(t) = *t {
                if t >= k {
                    return Err(Error::contract(format!("target {t} out of range {k}")));
                }
                total += kernels::log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("cross_entropy with no targets"));
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(total / count as f64), Op::CrossEntropy { logits, targets }, ng))
    }

    /// Row lookup: `table[v, d]` indexed by `indices` -> `[len, d]`.
    pub fn gather(&mut self, table: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::shape("gather", format!("{:?}", tt.shape())));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices.iter() {
            if i >= v {
                return Err(Error::contract(format!("gather index {i} out of range {v}")));
            }
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[indices.len().max(1), d], out)?;
        let ng = self.ng(table);
        Ok(self.push(t, Op::Gather { table, indices }, ng))
    }

    /// `[n, c, h, w] -> [n*h*w, c]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 4 {
            return Err(Error::shape("nchw_to_rows", format!("{:?}", tx.shape())));
        }
        let [n, c, h, w] = tx.dims4();
        let hw = h * w;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * hw + p) * c + ch] = tx.data()[(b * c + ch) * hw + p];
                }
            }
        }
        let t = Tensor::new(&[n * hw, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::NchwToRows(x), ng))
    }

    /// `[n*h*w, c] -> [n, c, h, w]`.
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap();
        if tx.numel() != n * c * h * w {
            return Err(Error::shape("rows_to_nchw", format!("{:?} -> {n}x{c}x{h}x{w}", tx.shape())));
        }
        let hw = h * w;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * c + ch) * hw + p] = tx.data()[(b * hw + p) * c + ch];
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::RowsToNchw(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::MulConst(a, c) => self.accumulate(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * c[i];
                }
            }),
            Op::Square(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * va[i] * g[i];
                    }
                });
            }
            Op::Abs(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        let s = if va[i] > 0.0 {
                            1.0
                        } else if va[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[i] += s * g[i];
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let va = val(*a);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += kernels::gelu_grad(va[i]) * g[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += kernels::sigmoid(va[i]) * g[i];
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.ng(*a) {
                    let da = kernels::matmul_grad_a(g, val(*b), *m, *k, *n);
                    self.accumulate(grads, *a, |d| d.iter_mut().zip(&da).for_each(|(x, y)| *x += y));
                }
                if self.ng(*b) {
                    let db = kernels::matmul_grad_b(val(*a), g, *m, *k, *n);
                    self.accumulate(grads, *b, |d| d.iter_mut().zip(&db).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let n = self.nodes[bias.0].value.numel();
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks(n) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let padded = kernels::pad_input(val(*x), geom);
                let (dpad, dw, db) = kernels::conv2d_backward(&padded, val(*w), g, geom, self.ng(*x));
                if let Some(dpad) = dpad {
                    let dx = kernels::unpad_grad(&dpad, geom);
                    self.accumulate(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                self.accumulate(grads, *w, |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                if let Some(b) = b {
                    self.accumulate(grads, *b, |d| d.iter_mut().zip(&db).for_each(|(a, b)| *a += b));
                }
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4();
                self.accumulate(grads, *x, |d| {
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(xs) => {
                let [n, ctot, h, w] = node.value.dims4();
                let hw = h * w;
                let mut off = 0;
                for &x in xs {
                    let c = self.nodes[x.0].value.dims4()[1];
                    self.accumulate(grads, x, |d| {
                        for b in 0..n {
                            let src = &g[(b * ctot + off) * hw..(b * ctot + off + c) * hw];
                            for (a, s) in d[b * c * hw..(b + 1) * c * hw].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ChannelNorm { x, norms } => {
                let [n, c, h, w] = node.value.dims4();
                let hw = h * w;
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for b in 0..n {
                        for p in 0..hw {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                let i = (b * c + ch) * hw + p;
                                dot += y[i] * g[i];
                            }
                            let nv = norms[b * hw + p];
                            for ch in 0..c {
                                let i = (b * c + ch) * hw + p;
                                d[i] += (g[i] - y[i] * dot) / nv;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let dsz = self.nodes[gamma.0].value.numel();
                let (xv, gv) = (val(*x), val(*gamma));
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; dsz];
                    let mut dbt = vec![0.0; dsz];
                    for (r, (&(mean, inv), grow)) in stats.iter().zip(g.chunks(dsz)).enumerate() {
                        let xrow = &xv[r * dsz..(r + 1) * dsz];
                        for j in 0..dsz {
                            dg[j] += grow[j] * (xrow[j] - mean) * inv;
                            dbt[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, |d| d.iter_mut().zip(&dg).for_each(|(a, b)| *a += b));
                    self.accumulate(grads, *beta, |d| d.iter_mut().zip(&dbt).for_each(|(a, b)| *a += b));
                }
                self.accumulate(grads, *x, |d| {
                    let nf = dsz as f64;
                    for (r, &(mean, inv)) in stats.iter().enumerate() {
                        let xrow = &xv[r * dsz..(r + 1) * dsz];
                        let grow = &g[r * dsz..(r + 1) * dsz];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..dsz {
                            let dy = grow[j] * gv[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * (xrow[j] - mean) * inv;
                        }
                        for j in 0..dsz {
                            let xhat = (xrow[j] - mean) * inv;
                            let dy = grow[j] * gv[j];
                            d[r * dsz + j] += inv * (dy - sum_dy / nf - xhat * sum_dy_xhat / nf);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let shape = self.nodes[q.0].value.shape();
                let (b, t, dm) = (shape[0], shape[1], shape[2]);
                let dh = dm / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; t];
                for bi in 0..b {
                    let base = bi * t * dm;
                    for hd in 0..*heads {
                        let off = hd * dh;
                        for i in 0..t {
                            let prow = &probs[((bi * heads + hd) * t + i) * t..((bi * heads + hd) * t + i + 1) * t];
                            let gi = &g[base + i * dm + off..base + i * dm + off + dh];
                            let mut dot = 0.0;
                            for j in 0..=i {
                                let vj = &vd[base + j * dm + off..base + j * dm + off + dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += prow[j] * dp[j];
                                let dvj = &mut dv[base + j * dm + off..base + j * dm + off + dh];
                                for (a, gg) in dvj.iter_mut().zip(gi) {
                                    *a += prow[j] * gg;
                                }
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                for e in 0..dh {
                                    dq[base + i * dm + off + e] += ds * kd[base + j * dm + off + e];
                                    dk[base + j * dm + off + e] += ds * qd[base + i * dm + off + e];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, |d| d.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *k, |d| d.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *v, |d| d.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let k = *self.nodes[logits.0].value.shape().last().unwrap();
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                self.accumulate(grads, *logits, |d| {
                    let mut p = vec![0.0; k];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        p.copy_from_slice(&lv[r * k..(r + 1) * k]);
                        kernels::softmax_in_place(&mut p);
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * k + j] += g[0] * (p[j] - onehot) / count;
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d_ = self.nodes[table.0].value.shape()[1];
                self.accumulate(grads, *table, |d| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d_ {
                            d[i * d_ + j] += g[r * d_ + j];
                        }
                    }
                });
            }
            Op::NchwToRows(x) => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4();
                let hw = h * w;
                self.accumulate(grads, *x, |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[(b * c + ch) * hw + p] += g[(b * hw + p) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::RowsToNchw(x) => {
                let [n, c, h, w] = node.value.dims4();
                let hw = h * w;
                self.accumulate(grads, *x, |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[(b * hw + p) * c + ch] += g[(b * c + ch) * hw + p];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
        }
    }
}
