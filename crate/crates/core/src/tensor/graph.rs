//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its
//! forward value and whatever it needs for the backward rule. Node indices
//! are assigned in creation order, so inputs always precede their consumers
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Trainable state lives outside the tape in [`Param`]s. A fresh graph is
//! built for every step; [`Graph::param`] copies a parameter in as a leaf
//! and [`Graph::param_grad`] reads its gradient back after the sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamId, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Backward rule for an operation defined outside this module.
///
/// Returns one entry per input: the gradient contribution with the input's
/// shape, or `None` when the input is not differentiated.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Softmax(Var),
    Reshape(Var),
    Conv2d { x: Var, kernel: Var, bias: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id {
            return Err(Error::contract("variable belongs to a different graph"));
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var { graph: self.id, index }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a trainable parameter. Repeated calls for the same
    /// parameter return the same node; frozen parameters are not
    /// differentiated.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bound.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value().clone(), !p.is_frozen());
        self.bound.insert(p.id(), v);
        v
    }

    /// Route every later [`Graph::param`] lookup of `p` to `v`.
    pub fn bind(&mut self, p: &Param, v: Var) {
        self.bound.insert(p.id(), v);
    }

    pub fn param_grad(&self, p: &Param) -> Option<&[f64]> {
        self.bound.get(&p.id()).and_then(|&v| self.grad(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.graph, self.id);
        &self.nodes[v.index].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.index].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (r, s) = av.dims2("matmul")?;
        let (s2, t) = bv.dims2("matmul")?;
        if s != s2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), r, s, t);
        let value = Tensor::new(vec![r, t], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Broadcast-add a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(bias)?.value);
        let t = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [t] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(t) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Scale(x, factor)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.node(x)?.value.data().iter().sum();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        // NaN passes through so corrupted weights surface as a non-finite loss
        let data = xv.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Relu(x)))
    }

    /// Softmax along the last axis, stabilized by subtracting the row max.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let m = *xv.shape().last().unwrap_or(&0);
        if m == 0 {
            return Err(Error::shape("row_softmax", xv.shape(), &[]));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Stride-1, unpadded cross-correlation with per-filter bias.
    ///
    /// `x`: N×C×H×W, `kernel`: F×C×kh×kw, `bias`: F.
    pub fn conv2d_valid(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (&self.node(x)?.value, &self.node(kernel)?.value, &self.node(bias)?.value);
        let geo = ConvGeometry::new(xv.shape(), kv.shape())?;
        if bv.shape() != [geo.f] {
            return Err(Error::shape("conv2d_valid", kv.shape(), bv.shape()));
        }
        let out = conv_forward(&geo, xv.data(), kv.data(), bv.data());
        let value = Tensor::new(vec![geo.n, geo.f, geo.oh, geo.ow], out)?;
        let rg = self.needs(&[x, kernel, bias]);
        Ok(self.push(value, rg, Op::Conv2d { x, kernel, bias }))
    }

    /// 2×2 max pooling with stride 2; a trailing odd row or column is
    /// dropped. Ties resolve to the first cell in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let [n, c, h, w] = xv.shape()[..] else {
            return Err(Error::shape("maxpool2", xv.shape(), &[]));
        };
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool2", xv.shape(), &[2, 2]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let top = base + 2 * i * w + 2 * j;
                    let cells = [top, top + 1, top + w, top + w + 1];
                    let mut best = cells[0];
                    for &cell in &cells[1..] {
                        if src[cell] > src[best] {
                            best = cell;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    /// Record an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        for &v in inputs {
            self.node(v)?;
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls;
    /// intermediate gradients are recomputed from scratch each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if !node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate(loss, vec![1.0]);

        for index in (0..=loss.index).rev() {
            let Some(grad) = self.nodes[index].grad.take() else {
                continue;
            };
            let contributions = self.backward_rule(index, &grad);
            self.nodes[index].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.index];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn backward_rule(&self, index: usize, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[index];
        let val = |v: Var| &self.nodes[v.index].value;
        let wants = |v: Var| self.nodes[v.index].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, s) = (av.shape()[0], av.shape()[1]);
                let t = bv.shape()[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; r * s];
                    for i in 0..r {
                        let gi = &grad[i * t..(i + 1) * t];
                        for k in 0..s {
                            let bk = &bv.data()[k * t..(k + 1) * t];
                            da[i * s + k] = dot(gi, bk);
                        }
                    }
                    out.push((*a, da));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; s * t];
                    for i in 0..r {
                        let gi = &grad[i * t..(i + 1) * t];
                        for k in 0..s {
                            let aik = av.data()[i * s + k];
                            if aik != 0.0 {
                                axpy(aik, gi, &mut db[k * t..(k + 1) * t]);
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        out.push((v, grad.to_vec()));
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    out.push((*x, grad.to_vec()));
                }
                if wants(*b) {
                    let t = val(*b).len();
                    let mut db = vec![0.0; t];
                    for row in grad.chunks(t) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    out.push((*x, grad.iter().map(|g| g * c).collect()));
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    out.push((*x, vec![grad[0]; val(*x).len()]));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let d = val(*x)
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let m = *node.value.shape().last().unwrap();
                    let mut d = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(m).zip(grad.chunks(m)).zip(d.chunks_mut(m)) {
                        let inner = dot(yr, gr);
                        for k in 0..m {
                            dr[k] = yr[k] * (gr[k] - inner);
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    out.push((*x, grad.to_vec()));
                }
            }
            Op::Conv2d { x, kernel, bias } => {
                let (xv, kv) = (val(*x), val(*kernel));
                let geo = ConvGeometry::new(xv.shape(), kv.shape()).expect("checked in forward");
                let (dx, dk, db) = conv_backward(
                    &geo,
                    xv.data(),
                    kv.data(),
                    grad,
                    wants(*x),
                    wants(*kernel),
                    wants(*bias),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*kernel, d)));
                out.extend(db.map(|d| (*bias, d)));
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let mut d = vec![0.0; val(*x).len()];
                    for (&cell, &g) in argmax.iter().zip(grad) {
                        d[cell] += g;
                    }
                    out.push((*x, d));
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&values, &node.value, grad);
                debug_assert_eq!(grads.len(), inputs.len(), "{}", op.name());
                for (&v, g) in inputs.iter().zip(grads) {
                    if let Some(g) = g {
                        if wants(v) {
                            debug_assert_eq!(g.len(), val(v).len(), "{}", op.name());
                            out.push((v, g));
                        }
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, s: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * t];
    for i in 0..r {
        let oi = &mut out[i * t..(i + 1) * t];
        for k in 0..s {
            let aik = a[i * s + k];
            if aik != 0.0 {
                axpy(aik, &b[k * t..(k + 1) * t], oi);
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize]) -> Result<Self> {
        let ([n, c, h, w], [f, kc, kh, kw]) = (x, k) else {
            return Err(Error::shape("conv2d_valid", x, k));
        };
        if c != kc || kh > h || kw > w || *kh == 0 || *kw == 0 {
            return Err(Error::shape("conv2d_valid", x, k));
        }
        Ok(ConvGeometry {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            f: *f,
            kh: *kh,
            kw: *kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        })
    }
}

fn conv_forward(g: &ConvGeometry, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.f * plane_out];
    for n in 0..g.n {
        for f in 0..g.f {
            let o = &mut out[(n * g.f + f) * plane_out..(n * g.f + f + 1) * plane_out];
            o.fill(bias[f]);
            for c in 0..g.c {
                let xp = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let kv = k[((f * g.c + c) * g.kh + u) * g.kw + v];
                        for i in 0..g.oh {
                            let xr = &xp[(i + u) * g.w + v..(i + u) * g.w + v + g.ow];
                            axpy(kv, xr, &mut o[i * g.ow..(i + 1) * g.ow]);
                        }
                    }
                }
            }
        }
    }
    out
}

type Grads3 = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    want_x: bool,
    want_k: bool,
    want_b: bool,
) -> Grads3 {
    let plane_out = g.oh * g.ow;
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dk = want_k.then(|| vec![0.0; k.len()]);
    let mut db = want_b.then(|| vec![0.0; g.f]);
    for n in 0..g.n {
        for f in 0..g.f {
            let go = &dout[(n * g.f + f) * plane_out..(n * g.f + f + 1) * plane_out];
            if let Some(db) = db.as_mut() {
                db[f] += go.iter().sum::<f64>();
            }
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let kidx = ((f * g.c + c) * g.kh + u) * g.kw + v;
                        let mut acc = 0.0;
                        for i in 0..g.oh {
                            let row = xbase + (i + u) * g.w + v;
                            let gr = &go[i * g.ow..(i + 1) * g.ow];
                            if let Some(dx) = dx.as_mut() {
                                axpy(k[kidx], gr, &mut dx[row..row + g.ow]);
                            }
                            if dk.is_some() {
                                acc += dot(gr, &x[row..row + g.ow]);
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}
