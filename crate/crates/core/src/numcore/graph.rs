//! Tape of tensor operations with exact reverse-mode gradients.
//!
//! A [`Graph`] records one forward pass against an immutable [`ParamSet`].
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns gradients for every parameter that took part.

use std::sync::atomic::{AtomicU32, Ordering};

use super::param::{Gradients, ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a particular graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: u32,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    AttentionLogits { keys: Var, queries: Var, w: Var },
    WeightedBce { probs: Var, targets: Tensor, pos_weight: f64 },
    Sum(Var),
    MeanCols(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the [`ParamSet`].
    value: Option<Tensor>,
}

/// Lower and upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Graph<'p> {
    id: u32,
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            graph: self.id,
            idx: (self.nodes.len() - 1) as u32,
        }
    }

    fn owns(&self, v: Var) -> bool {
        v.graph == self.id && (v.idx as usize) < self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert!(self.owns(v), "variable {v:?} was not recorded on this graph");
        let node = &self.nodes[v.idx as usize];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.value(*id),
            _ => unreachable!("node without a value"),
        }
    }

    /// Records a constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, Some(t))
    }

    /// The node for a parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(Op::Param(id), None);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `x W^T + b` for `x: N x p`, `W: q x p`, `b: q`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, p) = xv.dims2();
        let (q, p2) = wv.dims2();
        assert_eq!(
            p,
            p2,
            "affine shape mismatch: input {:?} vs weight {:?}",
            xv.shape(),
            wv.shape()
        );
        let mut out = vec![0.0; n * q];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), q, "affine bias {:?} vs weight {:?}", bv.shape(), wv.shape());
            for r in 0..n {
                out[r * q..(r + 1) * q].copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..n {
            let xr = &xd[r * p..(r + 1) * p];
            for c in 0..q {
                let wr = &wd[c * p..(c + 1) * p];
                out[r * q + c] += dot(xr, wr);
            }
        }
        self.push(Op::Affine { x, w, b }, Some(Tensor::new(&[n, q], out)))
    }

    /// Plain matrix product `a: N x K` times `b: K x M`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, k) = av.dims2();
        let (k2, m) = bv.dims2();
        assert_eq!(k, k2, "matmul shape mismatch: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for t in 0..k {
                let a_it = av.data()[i * k + t];
                if a_it == 0.0 {
                    continue;
                }
                let brow = &bv.data()[t * m..(t + 1) * m];
                for (o, bb) in out[i * m..(i + 1) * m].iter_mut().zip(brow) {
                    *o += a_it * bb;
                }
            }
        }
        self.push(Op::MatMul(a, b), Some(Tensor::new(&[n, m], out)))
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(
            av.dims2(),
            bv.dims2(),
            "{what} shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = av.dims2();
        Tensor::new(&[r, c], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, "add", |x, y| x + y);
        self.push(Op::Add(a, b), Some(t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, "sub", |x, y| x - y);
        self.push(Op::Sub(a, b), Some(t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul(a, b), Some(t))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let (r, c) = av.dims2();
        Tensor::new(&[r, c], av.data().iter().map(|&x| f(x)).collect())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(Op::Sigmoid(a), Some(t))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(Op::Tanh(a), Some(t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(Op::Relu(a), Some(t))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(Op::SoftmaxRows(a), Some(Tensor::new(&[r, c], out)))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, rows, "concat row mismatch: {r} vs {rows}");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Some(Tensor::new(&[rows, total], out)),
        )
    }

    /// Row `r` of a matrix, as a `1 x cols` matrix.
    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let av = self.value(a);
        assert!(r < av.rows(), "row {r} out of range for shape {:?}", av.shape());
        let t = Tensor::row(av.row_slice(r).to_vec());
        self.push(Op::Row(a, r), Some(t))
    }

    /// Stacks `1 x p` rows into an `n x p` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack of nothing");
        let p = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * p);
        for &r in rows {
            let v = self.value(r);
            assert_eq!(v.len(), p, "stack width mismatch");
            out.extend_from_slice(v.data());
        }
        self.push(
            Op::StackRows(rows.to_vec()),
            Some(Tensor::new(&[rows.len(), p], out)),
        )
    }

    /// Additive attention scores `out[i, j] = sum_k w[k] * tanh(keys[j, k] + queries[i, k])`
    /// for `keys: M x d`, `queries: N x d`, `w: d`. Output is `N x M`.
    pub fn attention_logits(&mut self, keys: Var, queries: Var, w: Var) -> Var {
        let kv = self.value(keys);
        let qv = self.value(queries);
        let wv = self.value(w);
        let (m, d) = kv.dims2();
        let (n, d2) = qv.dims2();
        assert_eq!(d, d2, "attention width mismatch {:?} vs {:?}", kv.shape(), qv.shape());
        assert_eq!(wv.len(), d, "attention scorer {:?} vs width {d}", wv.shape());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let qi = qv.row_slice(i);
            for j in 0..m {
                let kj = kv.row_slice(j);
                let mut s = 0.0;
                for k in 0..d {
                    s += wv.data()[k] * (kj[k] + qi[k]).tanh();
                }
                out[i * m + j] = s;
            }
        }
        self.push(
            Op::AttentionLogits { keys, queries, w },
            Some(Tensor::new(&[n, m], out)),
        )
    }

    /// Mean over all entries of
    /// `-(pos_weight * y * ln p + (1 - y) * ln(1 - p))`, with `p` clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn weighted_bce(&mut self, probs: Var, targets: Tensor, pos_weight: f64) -> Var {
        let pv = self.value(probs);
        assert_eq!(
            pv.dims2(),
            targets.dims2(),
            "bce shape mismatch: probs {:?} vs targets {:?}",
            pv.shape(),
            targets.shape()
        );
        let n = pv.len().max(1) as f64;
        let loss: f64 = pv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            Op::WeightedBce {
                probs,
                targets,
                pos_weight,
            },
            Some(Tensor::scalar(loss)),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Some(Tensor::scalar(s)))
    }

    /// Mean of each row, giving an `N x 1` column.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let out = (0..r)
            .map(|i| av.row_slice(i).iter().sum::<f64>() / c as f64)
            .collect();
        self.push(Op::MeanCols(a), Some(Tensor::new(&[r, 1], out)))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// parameter reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::InvalidInput(format!(
                "backward called on {loss:?}, which was not recorded on this graph"
            )));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let top = loss.idx as usize;
        let mut grads: Vec<Option<Tensor>> = vec![None; top + 1];
        grads[top] = Some(Tensor::filled(lv.shape(), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for idx in (0..=top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut out.grads[id.index()], g),
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, p) = xv.dims2();
                    let q = wv.rows();
                    let gd = g.data();
                    let mut dx = vec![0.0; n * p];
                    let mut dw = vec![0.0; q * p];
                    for r in 0..n {
                        let xr = xv.row_slice(r);
                        let dxr = &mut dx[r * p..(r + 1) * p];
                        for c in 0..q {
                            let gv = gd[r * q + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let wr = wv.row_slice(c);
                            for k in 0..p {
                                dxr[k] += gv * wr[k];
                            }
                            let dwr = &mut dw[c * p..(c + 1) * p];
                            for k in 0..p {
                                dwr[k] += gv * xr[k];
                            }
                        }
                    }
                    self.send(&mut grads, *x, Tensor::new(xv.shape(), dx));
                    self.send(&mut grads, *w, Tensor::new(wv.shape(), dw));
                    if let Some(b) = b {
                        let mut db = vec![0.0; q];
                        for r in 0..n {
                            for c in 0..q {
                                db[c] += gd[r * q + c];
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        self.send(&mut grads, *b, Tensor::new(&shape, db));
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, k) = av.dims2();
                    let m = bv.cols();
                    let gd = g.data();
                    let mut da = vec![0.0; n * k];
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let gi = &gd[i * m..(i + 1) * m];
                        for t in 0..k {
                            let brow = bv.row_slice(t);
                            da[i * k + t] = dot(gi, brow);
                            let a_it = av.data()[i * k + t];
                            for (d, gg) in db[t * m..(t + 1) * m].iter_mut().zip(gi) {
                                *d += a_it * gg;
                            }
                        }
                    }
                    self.send(&mut grads, *a, Tensor::new(av.shape(), da));
                    self.send(&mut grads, *b, Tensor::new(bv.shape(), db));
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, self.reshape_like(*a, g.clone()));
                    self.send(&mut grads, *b, self.reshape_like(*b, g));
                }
                Op::Sub(a, b) => {
                    let neg = g.map(|v| -v);
                    self.send(&mut grads, *a, self.reshape_like(*a, g));
                    self.send(&mut grads, *b, self.reshape_like(*b, neg));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = zip_data(&g, bv, |gg, y| gg * y);
                    let db = zip_data(&g, av, |gg, x| gg * x);
                    self.send(&mut grads, *a, Tensor::new(av.shape(), da));
                    self.send(&mut grads, *b, Tensor::new(bv.shape(), db));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let d = zip_data(&g, y, |gg, s| gg * s * (1.0 - s));
                    self.send(&mut grads, *a, self.reshape_like(*a, Tensor::new(y.shape(), d)));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    let d = zip_data(&g, y, |gg, t| gg * (1.0 - t * t));
                    self.send(&mut grads, *a, self.reshape_like(*a, Tensor::new(y.shape(), d)));
                }
                Op::Relu(a) => {
                    let y = node.value.as_ref().expect("value");
                    let d = zip_data(&g, y, |gg, r| if r > 0.0 { gg } else { 0.0 });
                    self.send(&mut grads, *a, self.reshape_like(*a, Tensor::new(y.shape(), d)));
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let (r, c) = y.dims2();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yi = y.row_slice(i);
                        let gi = &g.data()[i * c..(i + 1) * c];
                        let inner = dot(gi, yi);
                        for j in 0..c {
                            d[i * c + j] = yi[j] * (gi[j] - inner);
                        }
                    }
                    self.send(&mut grads, *a, self.reshape_like(*a, Tensor::new(&[r, c], d)));
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = g.dims2();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        self.send(&mut grads, p, Tensor::new(pv.shape(), d));
                    }
                }
                Op::Row(a, r) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let slot = grads[a.idx as usize].get_or_insert_with(|| Tensor::zeros(av.shape()));
                    for (d, gg) in slot.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.data()) {
                        *d += gg;
                    }
                }
                Op::StackRows(rows) => {
                    let p = g.cols();
                    for (i, &r) in rows.iter().enumerate() {
                        let shape = self.value(r).shape().to_vec();
                        let d = g.data()[i * p..(i + 1) * p].to_vec();
                        self.send(&mut grads, r, Tensor::new(&shape, d));
                    }
                }
                Op::AttentionLogits { keys, queries, w } => {
                    let kv = self.value(*keys);
                    let qv = self.value(*queries);
                    let wv = self.value(*w);
                    let (m, d) = kv.dims2();
                    let n = qv.rows();
                    let wd = wv.data();
                    let mut dk = vec![0.0; m * d];
                    let mut dq = vec![0.0; n * d];
                    let mut dw = vec![0.0; d];
                    for i in 0..n {
                        let qi = qv.row_slice(i);
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let kj = kv.row_slice(j);
                            for k in 0..d {
                                let t = (kj[k] + qi[k]).tanh();
                                dw[k] += gij * t;
                                let pre = gij * wd[k] * (1.0 - t * t);
                                dk[j * d + k] += pre;
                                dq[i * d + k] += pre;
                            }
                        }
                    }
                    self.send(&mut grads, *keys, Tensor::new(kv.shape(), dk));
                    self.send(&mut grads, *queries, Tensor::new(qv.shape(), dq));
                    self.send(&mut grads, *w, Tensor::new(wv.shape(), dw));
                }
                Op::WeightedBce {
                    probs,
                    targets,
                    pos_weight,
                } => {
                    let pv = self.value(*probs);
                    let scale = g.item() / pv.len().max(1) as f64;
                    let d = pv
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&p, &y)| {
                            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                                0.0
                            } else {
                                scale * (-pos_weight * y / p + (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    self.send(&mut grads, *probs, Tensor::new(pv.shape(), d));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    self.send(&mut grads, *a, Tensor::filled(av.shape(), g.item()));
                }
                Op::MeanCols(a) => {
                    let av = self.value(*a);
                    let (r, c) = av.dims2();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c..(i + 1) * c].fill(g.data()[i] / c as f64);
                    }
                    self.send(&mut grads, *a, Tensor::new(av.shape(), d));
                }
            }
        }
        Ok(out)
    }

    fn reshape_like(&self, v: Var, t: Tensor) -> Tensor {
        let shape = self.value(v).shape();
        if t.shape() == shape {
            t
        } else {
            Tensor::new(shape, t.into_data())
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        accumulate(&mut grads[to.idx as usize], g);
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_data(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
