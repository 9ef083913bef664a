//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends a node to the [`Tape`]; inputs always precede outputs,
//! so walking the node list backwards is a valid reverse topological order
//! and visits each node once.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    SwapAxes12(Var),
    Reshape(Var),
    Softmax(Var),
    MaskKeys { x: Var, keep: Vec<bool> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Tanh(Var),
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    /// Scalar whose partial derivatives w.r.t. each input were computed
    /// alongside the value.
    Fused(Vec<(Var, Vec<T>)>),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed ops with whatever each needs for its gradient.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
    backward_done: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanhf` dominated GELU cost.
fn fast_tanh<T: Float>(u: T) -> T {
    let e = (T::lit(-2.0) * u.abs()).exp();
    ((T::one() - e) / (T::one() + e)).copysign(u)
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, saved intermediate and gradient.
    pub fn clear(&mut self) {
        self.nodes = Vec::new();
        self.grads = Vec::new();
        self.params.clear();
        self.backward_done = false;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "constant shape");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Registers parameter `index` of some parameter store; repeated calls
    /// with the same index return the same node.
    pub fn param(&mut self, index: usize, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&index) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad());
        self.params.insert(index, v);
        v
    }

    /// `(param index, gradient)` for every registered parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(move |(&i, &v)| self.grad(v).map(|g| (i, g)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias(x, bias), rg))
    }

    /// `x[..., k] · w[k, n]`, treating the leading dims of `x` as rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::Shape {
                op: "matmul",
                left: xs,
                right: ws,
            });
        }
        let n = ws[1];
        let m = self.value(x).len() / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm_acc(m, k, n, self.value(x), false, self.value(w), false, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(shape, out, Op::MatMul(x, w), rg))
    }

    /// Batched product of `a[B, m, k]` with `b[B, k, n]`, or with
    /// `b[B, n, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let bad = || Error::Shape {
            op: "bmm",
            left: as_.clone(),
            right: bs.clone(),
        };
        if as_.len() < 2 || bs.len() != as_.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(bad());
        }
        let r = as_.len();
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (kb, n) = if trans_b { (bs[r - 1], bs[r - 2]) } else { (bs[r - 2], bs[r - 1]) };
        if kb != k {
            return Err(bad());
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                T::gemm_acc(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "swap_axes12",
                left: s,
                right: vec![4],
            });
        }
        let value = swap12(self.value(x), &s);
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[2], s[1], s[3]], value, Op::SwapAxes12(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let src = self.value(x);
        let mut value = vec![T::zero(); src.len()];
        for (row, out) in src.chunks(n).zip(value.chunks_mut(n)) {
            softmax_row(row, out);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Softmax(x), rg)
    }

    /// Sets attention scores `x[B, heads, q, k]` to `-inf` wherever
    /// `key_mask[B, k]` is 0.
    pub fn mask_keys(&mut self, x: Var, key_mask: &[u8]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || key_mask.len() != s[0] * s[3] {
            return Err(Error::Shape {
                op: "mask_keys",
                left: s,
                right: vec![key_mask.len()],
            });
        }
        let (b, h, q, k) = (s[0], s[1], s[2], s[3]);
        let mut keep = Vec::with_capacity(b * h * q * k);
        for bi in 0..b {
            let row = &key_mask[bi * k..(bi + 1) * k];
            for _ in 0..h * q {
                keep.extend(row.iter().map(|&m| m != 0));
            }
        }
        let value = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &kp)| if kp { v } else { T::neg_infinity() })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(s, value, Op::MaskKeys { x, keep }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let src = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let rows = src.len() / n;
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut value = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                value[r * n + j] = xh * g[j] + bt[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let value = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + fast_tanh(c * (v + a * v * v * v))))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Tanh(x), rg)
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, rg))
    }

    /// Rows of `table[V, H]` selected by `ids`, shaped `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                left: s,
                right: vec![2],
            });
        }
        let (v, h) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: v,
            });
        }
        let tv = self.value(table);
        let value = ids.iter().flat_map(|&i| tv[i * h..(i + 1) * h].iter().copied()).collect();
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), h],
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x` viewed as `[N, last]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let h = *self.shape(x).last().unwrap();
        let n = self.value(x).len() / h;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                what: "rows",
                index: bad,
                size: n,
            });
        }
        let src = self.value(x);
        let value = rows.iter().flat_map(|&r| src[r * h..(r + 1) * h].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), h],
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to `parts`.
    pub fn fused_scalar(&mut self, value: T, parts: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, d) in &parts {
            if d.len() != self.value(*v).len() {
                return Err(Error::Shape {
                    op: "fused_scalar",
                    left: self.shape(*v).to_vec(),
                    right: vec![d.len()],
                });
            }
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(vec![1], vec![value], Op::Fused(parts), rg))
    }

    /// Populates gradients of `loss` with respect to every ancestor that
    /// requires one. May be called once per recorded graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape; clear it first"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let mut buf = self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]);
        f(&mut buf, &self.nodes);
        self.grads[v.0] = Some(buf);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| add_into(gb, g));
            }
            Op::AddBias(x, b) => {
                self.acc(*x, |gx, _| add_into(gx, g));
                self.acc(*b, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, nodes| {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d += gv * bv;
                    }
                });
                self.acc(b, |gb, nodes| {
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |ga, _| ga.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * c));
            }
            Op::MatMul(x, w) => {
                let (x, w) = (*x, *w);
                let (k, n) = {
                    let ws = &self.nodes[w.0].shape;
                    (ws[0], ws[1])
                };
                let m = g.len() / n;
                self.acc(x, |gx, nodes| T::gemm_acc(m, n, k, g, false, &nodes[w.0].value, true, gx));
                self.acc(w, |gw, nodes| T::gemm_acc(k, m, n, &nodes[x.0].value, true, g, false, gw));
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (a, b, batch, m, k, n, tb) = (*a, *b, *batch, *m, *k, *n, *trans_b);
                self.acc(a, |ga, nodes| {
                    let bv = &nodes[b.0].value;
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ (or dC · B when B was used transposed)
                        T::gemm_acc(m, n, k, gi, false, bi, !tb, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                });
                self.acc(b, |gb, nodes| {
                    let av = &nodes[a.0].value;
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            T::gemm_acc(n, m, k, gi, true, ai, false, out);
                        } else {
                            T::gemm_acc(k, m, n, ai, true, gi, false, out);
                        }
                    }
                });
            }
            Op::SwapAxes12(x) => {
                let s = self.nodes[i].shape.clone();
                let back = swap12(g, &s);
                self.acc(*x, |gx, _| add_into(gx, &back));
            }
            Op::Reshape(x) => self.acc(*x, |gx, _| add_into(gx, g)),
            Op::Softmax(x) => {
                let n = *self.nodes[i].shape.last().unwrap();
                let y = std::mem::take(&mut self.nodes[i].value);
                self.acc(*x, |gx, _| {
                    for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
                self.nodes[i].value = y;
            }
            Op::MaskKeys { x, keep } => {
                self.acc(*x, |gx, _| {
                    for ((d, &gv), &kp) in gx.iter_mut().zip(g).zip(keep) {
                        if kp {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = xhat.len() / rstd.len();
                let nf = T::lit(n as f64);
                self.acc(*x, |gx, nodes| {
                    let gam = &nodes[gamma.0].value;
                    let mut dxh = vec![T::zero(); n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxh[j] = gr[j] * gam[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xr[j];
                        }
                        let (m1, m2) = (s1 / nf, s2 / nf);
                        for j in 0..n {
                            gx[r * n + j] += rs * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                self.acc(*gamma, |gg, _| {
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &gv), &xv) in gg.iter_mut().zip(gr).zip(xr) {
                            *d += gv * xv;
                        }
                    }
                });
                self.acc(*beta, |gb, _| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Gelu(x) => {
                let x = *x;
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let (half, three) = (T::lit(0.5), T::lit(3.0));
                self.acc(x, |gx, nodes| {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(&nodes[x.0].value) {
                        let t = fast_tanh(c * (v + a * v * v * v));
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        *d += gv * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = std::mem::take(&mut self.nodes[i].value);
                self.acc(*x, |gx, _| {
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *d += gv * (T::one() - yv * yv);
                    }
                });
                self.nodes[i].value = y;
            }
            Op::Dropout { x, mask } => {
                self.acc(*x, |gx, _| {
                    for ((d, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                self.acc(*table, |gt, _| {
                    let h = g.len() / ids.len().max(1);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                self.acc(*x, |gx, _| {
                    let h = g.len() / rows.len().max(1);
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut gx[src * h..(src + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc(*x, |gx, _| gx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Fused(parts) => {
                let g0 = g[0];
                for (v, d) in parts {
                    self.acc(*v, |gv, _| {
                        for (o, &p) in gv.iter_mut().zip(d) {
                            *o += g0 * p;
                        }
                    });
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn swap12<T: Float>(src: &[T], s: &[usize]) -> Vec<T> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![T::zero(); src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let from = ((ia * b + ib) * c + ic) * d;
                let to = ((ia * c + ic) * b + ib) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}
