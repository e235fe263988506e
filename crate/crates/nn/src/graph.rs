//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape once in reverse and produces numeric
//! gradients. [`Graph::grad`] instead emits the gradient as *new nodes* in
//! the same graph, so the result can itself be differentiated; this is what
//! the Wasserstein gradient penalty needs. Symbolic gradients are implemented
//! for the element-wise, linear and gating ops a recurrent critic uses.
//!
//! Graphs are cheap and single-use. Batches are processed by building one
//! graph per example (see [`crate::parallel`]) and summing the per-example
//! [`Gradients`] in a fixed order, which keeps results bit-identical across
//! thread counts.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Stack(Vec<Var>),
    Row(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    Broadcast(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    MaxPool(Vec<Var>, Vec<usize>),
    Mask(Var, Vec<usize>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.push(Tensor::vector(data), Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Tensor::scalar(v), Op::Leaf)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(Tensor::zeros(n, 1), Op::Leaf)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node { value: Value::Borrowed(store.get(id)), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    // ---------------------------------------------------------------- ops

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let out = self.value(w).matvec(self.data(x));
        self.push(Tensor::vector(out), Op::MatVec(w, x))
    }

    pub fn matvec_t(&mut self, w: Var, v: Var) -> Var {
        let out = self.value(w).matvec_t(self.data(v));
        self.push(Tensor::vector(out), Op::MatTVec(w, v))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "shape mismatch in element-wise op");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_vec(ta.rows(), ta.cols(), ta.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::Shift(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.shift(n, 1.0)
    }

    /// Vector `a` times the single-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let t = self.map(a, |x| x * sv);
        self.push(t, Op::MulScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, tensor::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::with_capacity(parts.iter().map(|p| self.value(*p).len()).sum());
        for p in parts {
            data.extend_from_slice(self.data(*p));
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let data = self.data(a)[start..start + len].to_vec();
        self.push(Tensor::vector(data), Op::Slice(a, start, len))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack of zero rows");
        let cols = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let d = self.data(*r);
            assert_eq!(d.len(), cols, "stack rows must have equal length");
            data.extend_from_slice(d);
        }
        self.push(Tensor::from_vec(rows.len(), cols, data), Op::Stack(rows.to_vec()))
    }

    /// Row `r` of matrix `m` as a column vector (embedding lookup).
    pub fn row(&mut self, m: Var, r: usize) -> Var {
        let data = self.value(m).row(r).to_vec();
        self.push(Tensor::vector(data), Op::Row(m, r))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = tensor::dot(self.data(a), self.data(b));
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    pub fn broadcast(&mut self, s: Var, n: usize) -> Var {
        let v = self.scalar(s);
        self.push(Tensor::filled(n, 1, v), Op::Broadcast(s))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = Tensor::vector(tensor::softmax(self.data(a)));
        self.push(t, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = Tensor::vector(tensor::log_softmax(self.data(a)));
        self.push(t, Op::LogSoftmax(a))
    }

    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let v = self.data(a)[i];
        self.push(Tensor::scalar(v), Op::Pick(a, i))
    }

    /// Element-wise maximum over equal-length vectors (max-over-time pooling).
    pub fn max_pool(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "max_pool over zero vectors");
        let n = self.value(parts[0]).len();
        let mut best = self.data(parts[0]).to_vec();
        let mut arg = vec![0usize; n];
        for (pi, p) in parts.iter().enumerate().skip(1) {
            for (k, &v) in self.data(*p).iter().enumerate() {
                if v > best[k] {
                    best[k] = v;
                    arg[k] = pi;
                }
            }
        }
        self.push(Tensor::vector(best), Op::MaxPool(parts.to_vec(), arg))
    }

    /// Sets the listed entries to `-inf` (excluded from a following softmax).
    pub fn mask(&mut self, a: Var, idx: &[usize]) -> Var {
        let mut t = self.value(a).clone();
        for &i in idx {
            t.data_mut()[i] = f64::NEG_INFINITY;
        }
        self.push(t, Op::Mask(a, idx.to_vec()))
    }

    /// Mean squared error between two equal-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    // ----------------------------------------------------------- backward

    /// Numeric reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let op = &self.nodes[i].op;
            if matches!(op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, op, &g, &mut grads);
        }
        Backward { grads }
    }

    fn backprop_node(&self, i: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatVec(w, x) => {
                let wt = self.value(*w);
                let xd = self.data(*x);
                {
                    let dw = slot(grads, *w, wt.rows(), wt.cols());
                    for (r, &gr) in gd.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        for (d, xv) in dw.row_mut(r).iter_mut().zip(xd) {
                            *d += gr * xv;
                        }
                    }
                }
                let dx = wt.matvec_t(gd);
                add_into(slot(grads, *x, dx.len(), 1).data_mut(), &dx);
            }
            Op::MatTVec(w, v) => {
                let wt = self.value(*w);
                let vd = self.data(*v);
                {
                    let dw = slot(grads, *w, wt.rows(), wt.cols());
                    for (r, &vr) in vd.iter().enumerate() {
                        if vr == 0.0 {
                            continue;
                        }
                        for (d, gv) in dw.row_mut(r).iter_mut().zip(gd) {
                            *d += vr * gv;
                        }
                    }
                }
                let dv = wt.matvec(gd);
                add_into(slot(grads, *v, dv.len(), 1).data_mut(), &dv);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd);
                self.acc(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd);
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let da: Vec<f64> = gd.iter().zip(bd).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = gd.iter().zip(ad).map(|(g, a)| g * a).collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = gd.iter().map(|g| g * s).collect();
                self.acc(grads, *a, &da);
            }
            Op::Shift(a) => self.acc(grads, *a, gd),
            Op::MulScalar(a, s) => {
                let sv = self.scalar(*s);
                let da: Vec<f64> = gd.iter().map(|g| g * sv).collect();
                self.acc(grads, *a, &da);
                let ds = tensor::dot(gd, self.data(*a));
                self.acc(grads, *s, &[ds]);
            }
            Op::Sigmoid(a) => {
                let y = self.data(Var(i));
                let da: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let y = self.data(Var(i));
                let da: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc(grads, *a, &da);
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let da: Vec<f64> = gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.acc(grads, *a, &da);
            }
            Op::Exp(a) => {
                let y = self.data(Var(i));
                let da: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                self.acc(grads, *a, &da);
            }
            Op::Log(a) => {
                let x = self.data(*a);
                let da: Vec<f64> = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.acc(grads, *a, &da);
            }
            Op::Sqrt(a) => {
                let y = self.data(Var(i));
                let da: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect();
                self.acc(grads, *a, &da);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.acc(grads, *p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::Slice(a, start, len) => {
                let n = self.value(*a).len();
                let buf = slot(grads, *a, n, 1);
                add_into(&mut buf.data_mut()[*start..start + len], gd);
            }
            Op::Stack(rows) => {
                let cols = g.cols();
                for (r, v) in rows.iter().enumerate() {
                    self.acc(grads, *v, &gd[r * cols..(r + 1) * cols]);
                }
            }
            Op::Row(m, r) => {
                let mt = self.value(*m);
                let buf = slot(grads, *m, mt.rows(), mt.cols());
                add_into(buf.row_mut(*r), gd);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let da = vec![gd[0]; n];
                self.acc(grads, *a, &da);
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let da: Vec<f64> = self.data(*b).iter().map(|b| g0 * b).collect();
                let db: Vec<f64> = self.data(*a).iter().map(|a| g0 * a).collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Broadcast(s) => {
                let total: f64 = gd.iter().sum();
                self.acc(grads, *s, &[total]);
            }
            Op::Softmax(a) => {
                let y = self.data(Var(i));
                let gy = tensor::dot(gd, y);
                let da: Vec<f64> = gd.iter().zip(y).map(|(g, y)| y * (g - gy)).collect();
                self.acc(grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let y = self.data(Var(i));
                let gs: f64 = gd.iter().sum();
                let da: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g - y.exp() * gs).collect();
                self.acc(grads, *a, &da);
            }
            Op::Pick(a, idx) => {
                let n = self.value(*a).len();
                slot(grads, *a, n, 1).data_mut()[*idx] += gd[0];
            }
            Op::MaxPool(parts, arg) => {
                for (k, &src) in arg.iter().enumerate() {
                    let v = parts[src];
                    let n = self.value(v).len();
                    slot(grads, v, n, 1).data_mut()[k] += gd[k];
                }
            }
            Op::Mask(a, idx) => {
                let mut da = gd.to_vec();
                for &k in idx {
                    da[k] = 0.0;
                }
                self.acc(grads, *a, &da);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
        let t = self.value(v);
        add_into(slot(grads, v, t.rows(), t.cols()).data_mut(), g);
    }

    // ----------------------------------------------------------- symbolic

    /// Gradient of the single-element node `y` with respect to each of
    /// `wrt`, built as differentiable nodes of this graph.
    ///
    /// Panics when the path from `wrt` to `y` crosses an op without a
    /// symbolic rule (row gathers, softmax, pooling).
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(y).len(), 1, "grad of a non-scalar node");
        let n = y.0 + 1;
        let mut on_path = vec![false; n];
        for w in wrt {
            if w.0 < n {
                on_path[w.0] = true;
            }
        }
        for i in 0..n {
            if on_path[i] {
                continue;
            }
            on_path[i] = op_args(&self.nodes[i].op).iter().any(|a| on_path[a.0]);
        }
        let mut gv: Vec<Option<Var>> = vec![None; n];
        gv[y.0] = Some(self.scalar_const(1.0));
        let is_wrt = |i: usize| wrt.iter().any(|w| w.0 == i);
        for i in (0..n).rev() {
            if !on_path[i] || is_wrt(i) {
                continue;
            }
            let Some(g) = gv[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            let mut contrib: Vec<(Var, Var)> = Vec::new();
            match op {
                Op::Leaf | Op::Param => {}
                Op::MatVec(w, x) => {
                    assert!(!on_path[w.0], "symbolic gradient through a matrix operand is not supported");
                    if on_path[x.0] {
                        contrib.push((x, self.matvec_t(w, g)));
                    }
                }
                Op::MatTVec(w, v) => {
                    assert!(!on_path[w.0], "symbolic gradient through a matrix operand is not supported");
                    if on_path[v.0] {
                        contrib.push((v, self.matvec(w, g)));
                    }
                }
                Op::Add(a, b) => {
                    contrib.push((a, g));
                    contrib.push((b, g));
                }
                Op::Sub(a, b) => {
                    contrib.push((a, g));
                    if on_path[b.0] {
                        contrib.push((b, self.scale(g, -1.0)));
                    }
                }
                Op::Mul(a, b) => {
                    if on_path[a.0] {
                        contrib.push((a, self.mul(g, b)));
                    }
                    if on_path[b.0] {
                        contrib.push((b, self.mul(g, a)));
                    }
                }
                Op::Scale(a, s) => contrib.push((a, self.scale(g, s))),
                Op::Shift(a) => contrib.push((a, g)),
                Op::MulScalar(a, s) => {
                    if on_path[a.0] {
                        contrib.push((a, self.mul_scalar(g, s)));
                    }
                    if on_path[s.0] {
                        contrib.push((s, self.dot(g, a)));
                    }
                }
                Op::Sigmoid(a) => {
                    let om = self.one_minus(out);
                    let d = self.mul(out, om);
                    contrib.push((a, self.mul(g, d)));
                }
                Op::Tanh(a) => {
                    let sq = self.mul(out, out);
                    let d = self.one_minus(sq);
                    contrib.push((a, self.mul(g, d)));
                }
                Op::Relu(a) => {
                    let m: Vec<f64> = self.data(a).iter().map(|x| if *x > 0.0 { 1.0 } else { 0.0 }).collect();
                    let mv = self.vector(m);
                    contrib.push((a, self.mul(g, mv)));
                }
                Op::Exp(a) => contrib.push((a, self.mul(g, out))),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(p).len();
                        if on_path[p.0] {
                            contrib.push((p, self.slice(g, off, len)));
                        }
                        off += len;
                    }
                }
                Op::Slice(a, start, len) => {
                    let total = self.value(a).len();
                    let padded = self.pad(g, start, total - start - len);
                    contrib.push((a, padded));
                }
                Op::Sum(a) => {
                    let len = self.value(a).len();
                    contrib.push((a, self.broadcast(g, len)));
                }
                Op::Dot(a, b) => {
                    if on_path[a.0] {
                        contrib.push((a, self.mul_scalar(b, g)));
                    }
                    if on_path[b.0] {
                        contrib.push((b, self.mul_scalar(a, g)));
                    }
                }
                Op::Broadcast(s) => contrib.push((s, self.sum(g))),
                Op::Pick(a, idx) => {
                    let total = self.value(a).len();
                    let padded = self.pad(g, idx, total - idx - 1);
                    contrib.push((a, padded));
                }
                other => panic!("no symbolic gradient rule for {other:?}"),
            }
            for (arg, c) in contrib {
                if !on_path[arg.0] {
                    continue;
                }
                gv[arg.0] = Some(match gv[arg.0] {
                    Some(e) => self.add(e, c),
                    None => c,
                });
            }
        }
        wrt.iter()
            .map(|w| match gv.get(w.0).copied().flatten() {
                Some(v) => v,
                None => {
                    let len = self.value(*w).len();
                    self.zeros(len)
                }
            })
            .collect()
    }

    fn pad(&mut self, g: Var, before: usize, after: usize) -> Var {
        let mut parts = Vec::with_capacity(3);
        if before > 0 {
            parts.push(self.zeros(before));
        }
        parts.push(g);
        if after > 0 {
            parts.push(self.zeros(after));
        }
        if parts.len() == 1 {
            g
        } else {
            self.concat(&parts)
        }
    }
}

fn op_args(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::MatVec(a, b) | Op::MatTVec(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::MulScalar(a, b) | Op::Dot(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Shift(a) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Relu(a) | Op::Exp(a) => vec![*a],
        Op::Log(a) | Op::Sqrt(a) | Op::Slice(a, _, _) | Op::Row(a, _) | Op::Sum(a) | Op::Broadcast(a) => vec![*a],
        Op::Softmax(a) | Op::LogSoftmax(a) | Op::Pick(a, _) | Op::Mask(a, _) => vec![*a],
        Op::Concat(p) | Op::Stack(p) | Op::MaxPool(p, _) => p.clone(),
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Graph::backward`]: gradients of leaf and parameter nodes.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient with respect to a leaf node, if it received any signal.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients belonging to `store`.
    pub fn gradients(&self, graph: &Graph<'_>, store: &ParamStore) -> Gradients {
        let mut out = Gradients::for_store(store);
        for (&(uid, id), &v) in &graph.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = self.wrt(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    /// Central finite difference of `f` at `x` along every coordinate.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn composite(g: &mut Graph<'_>, w: Var, x: Var) -> Var {
        let a = g.matvec(w, x);
        let s = g.sigmoid(a);
        let t = g.tanh(x);
        let c = g.concat(&[s, t]);
        let sl = g.slice(c, 1, 3);
        let e = g.exp(sl);
        let m = g.mul(e, sl);
        let ls = g.log_softmax(m);
        let p = g.pick(ls, 2);
        let sm = g.softmax(c);
        let d = g.dot(sm, c);
        let q = g.add(p, d);
        let pos = g_shift_pos(g, q);
        let sq = g.sqrt(pos);
        let mp = g.max_pool(&[t, sl]);
        let ms = g.sum(mp);
        g.add(sq, ms)
    }

    fn g_shift_pos(g: &mut Graph<'_>, q: Var) -> Var {
        let s = g.square(q);
        g.shift(s, 1.0)
    }

    #[test]
    fn numeric_backward_matches_finite_differences() {
        let wdata = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let xdata = vec![0.2, -0.6, 0.9];
        let eval = |wd: &[f64], xd: &[f64]| {
            let mut g = Graph::new();
            let w = g.constant(Tensor::from_vec(2, 3, wd.to_vec()));
            let x = g.vector(xd.to_vec());
            let out = composite(&mut g, w, x);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let w = g.constant(Tensor::from_vec(2, 3, wdata.clone()));
        let x = g.vector(xdata.clone());
        let out = composite(&mut g, w, x);
        let back = g.backward(out);
        let gw = back.wrt(w).unwrap().data().to_vec();
        let gx = back.wrt(x).unwrap().data().to_vec();
        let nw = numeric_grad(&wdata, |wd| eval(wd, &xdata));
        let nx = numeric_grad(&xdata, |xd| eval(&wdata, xd));
        for (a, b) in gw.iter().zip(&nw).chain(gx.iter().zip(&nx)) {
            assert!(close(*a, *b, 1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn symbolic_gradient_matches_numeric_backward() {
        // f(x) = w2 · tanh(W1 x) * sigmoid(sum x)
        let w1 = Tensor::from_vec(2, 2, vec![0.5, -0.3, 0.8, 0.2]);
        let w2 = Tensor::from_vec(1, 2, vec![1.5, -0.7]);
        let mut g = Graph::new();
        let a = g.constant(w1);
        let b = g.constant(w2);
        let x = g.vector(vec![0.4, -0.9]);
        let h = g.matvec(a, x);
        let t = g.tanh(h);
        let o = g.matvec(b, t);
        let s = g.sum(x);
        let sg = g.sigmoid(s);
        let y = g.mul(o, sg);
        let numeric = g.backward(y).wrt(x).unwrap().data().to_vec();
        let sym = g.grad(y, &[x])[0];
        assert_eq!(g.value(sym).len(), 2);
        for (a, b) in g.data(sym).iter().zip(&numeric) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn second_order_through_symbolic_gradient() {
        // y = sum(tanh(W x)); penalty = |∇_x y|^2; check d penalty / d W numerically.
        let wdata = vec![0.5, -0.3, 0.8, 0.2, -0.1, 0.4];
        let xdata = vec![0.4, -0.9];
        let penalty = |wd: &[f64]| {
            let mut g = Graph::new();
            let w = g.constant(Tensor::from_vec(3, 2, wd.to_vec()));
            let x = g.vector(xdata.clone());
            let h = g.matvec(w, x);
            let t = g.tanh(h);
            let y = g.sum(t);
            let gx = g.grad(y, &[x])[0];
            let p = g.dot(gx, gx);
            (g.scalar(p), g, w, p)
        };
        let (_, g, w, p) = penalty(&wdata);
        let analytic = g.backward(p).wrt(w).unwrap().data().to_vec();
        let numeric = numeric_grad(&wdata, |wd| penalty(wd).0);
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!(close(*a, *b, 1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn mask_excludes_entries_from_softmax() {
        let mut g = Graph::new();
        let x = g.vector(vec![1.0, 2.0, 3.0]);
        let m = g.mask(x, &[2]);
        let p = g.softmax(m);
        assert_eq!(g.data(p)[2], 0.0);
        assert!((g.data(p).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn params_are_cached_and_routed_to_their_store() {
        let mut s1 = ParamStore::new();
        let a = s1.add("a", Tensor::vector(vec![1.0, 2.0]));
        let mut s2 = ParamStore::new();
        let b = s2.add("b", Tensor::vector(vec![3.0, 4.0]));
        let mut g = Graph::new();
        let va = g.param(&s1, a);
        assert_eq!(g.param(&s1, a), va);
        let vb = g.param(&s2, b);
        let d = g.dot(va, vb);
        let back = g.backward(d);
        let g1 = back.gradients(&g, &s1);
        let g2 = back.gradients(&g, &s2);
        assert_eq!(g1.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g2.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
