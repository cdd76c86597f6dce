//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. [`Tape::backward`] then walks the nodes in reverse order
//! and accumulates adjoints. Nodes whose inputs are all constants are marked
//! as not needing gradients and are skipped during the backward sweep.
//!
//! Matrices are row-major; "2-D" operations treat a tensor as
//! `rows x cols` where `rows` is the leading dimension.

use std::cell::RefCell;
use std::rc::Rc;

use log::warn;

use super::tensor::{gemm, Tensor};

/// Geometry of a valid (unpadded, stride 1) convolution in NHWC layout.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    k: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulScalar(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumRows(usize),
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    Rows(usize, Vec<usize>),
    Cols(usize, usize, usize),
    BroadcastRows(usize),
    Reshape(usize),
    Transpose(usize),
    LogSoftmax(usize),
    Pick(usize, Vec<usize>),
    SqDist(usize, usize),
    PairSum(usize, usize),
    RowNormalize(usize, Vec<bool>),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2(usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.value().len()],
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(ga) = acc(nodes, grads, p) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (Rc::clone(&nodes[*a].value), Rc::clone(&nodes[*b].value));
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv.data()[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av.data()[i];
                }
            }
        }
        Op::Div(a, b) => {
            let bv = Rc::clone(&nodes[*b].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv.data()[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] -= g[i] * out.data()[i] / bv.data()[i];
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
            }
            let n = nodes[*b].value.len();
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
            }
        }
        Op::MulScalar(x, s) => {
            let xv = Rc::clone(&nodes[*x].value);
            let sv = nodes[*s].value.data()[0];
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * sv);
            }
            if let Some(gs) = acc(nodes, grads, *s) {
                gs[0] += g.iter().zip(xv.data()).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        Op::MulCol(x, c) => {
            let (xv, cv) = (Rc::clone(&nodes[*x].value), Rc::clone(&nodes[*c].value));
            let cols = xv.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, v) in gx.iter_mut().enumerate() {
                    *v += g[i] * cv.data()[i / cols];
                }
            }
            if let Some(gc) = acc(nodes, grads, *c) {
                for i in 0..g.len() {
                    gc[i / cols] += g[i] * xv.data()[i];
                }
            }
        }
        Op::DivCol(x, c) => {
            let cv = Rc::clone(&nodes[*c].value);
            let cols = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, v) in gx.iter_mut().enumerate() {
                    *v += g[i] / cv.data()[i / cols];
                }
            }
            if let Some(gc) = acc(nodes, grads, *c) {
                for i in 0..g.len() {
                    gc[i / cols] -= g[i] * out.data()[i] / cv.data()[i / cols];
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * s);
            }
        }
        Op::AddConst(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * out.data()[i];
                }
            }
        }
        Op::Log(x) => {
            let xv = Rc::clone(&nodes[*x].value);
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] / xv.data()[i];
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    if out.data()[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    let s = out.data()[i];
                    gx[i] += g[i] * s * (1.0 - s);
                }
            }
        }
        Op::Softplus(x) => {
            let xv = Rc::clone(&nodes[*x].value);
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * sigmoid(xv.data()[i]);
                }
            }
        }
        Op::Square(x) => {
            let xv = Rc::clone(&nodes[*x].value);
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += 2.0 * g[i] * xv.data()[i];
                }
            }
        }
        Op::Clamp(x, lo, hi) => {
            let xv = Rc::clone(&nodes[*x].value);
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    let v = xv.data()[i];
                    if v >= *lo && v <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|p| *p += g[0]);
            }
        }
        Op::SumRows(x) => {
            let cols = nodes[*x].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, v) in gx.iter_mut().enumerate() {
                    *v += g[i / cols];
                }
            }
        }
        Op::HCat(parts) => {
            let total = out.cols();
            let rows = out.rows();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = acc(nodes, grads, p) {
                    for r in 0..rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::VCat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(gp) = acc(nodes, grads, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(a, b)| *a += b);
                }
                offset += n;
            }
        }
        Op::Rows(x, idx) => {
            let cols = nodes[*x].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[src * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Cols(x, start, end) => {
            let cols = nodes[*x].value.cols();
            let w = end - start;
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..out.rows() {
                    for c in 0..w {
                        gx[r * cols + start + c] += g[r * w + c];
                    }
                }
            }
        }
        Op::BroadcastRows(x) => {
            let n = nodes[*x].value.len();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, v) in g.iter().enumerate() {
                    gx[i % n] += v;
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (out.rows(), out.cols());
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[j * m + i] += g[i * n + j];
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let cols = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..out.rows() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        let p = out.data()[r * cols + c].exp();
                        gx[r * cols + c] += gr[c] - p * total;
                    }
                }
            }
        }
        Op::Pick(x, idx) => {
            let cols = nodes[*x].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
            }
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (Rc::clone(&nodes[*a].value), Rc::clone(&nodes[*b].value));
            let (n, m, d) = (av.rows(), bv.rows(), av.cols());
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; m * d];
            for i in 0..n {
                let ai = av.row_slice(i);
                for j in 0..m {
                    let gij = 2.0 * g[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let bj = bv.row_slice(j);
                    for k in 0..d {
                        let diff = gij * (ai[k] - bj[k]);
                        da[i * d + k] += diff;
                        db[j * d + k] -= diff;
                    }
                }
            }
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(&da).for_each(|(p, q)| *p += q);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(&db).for_each(|(p, q)| *p += q);
            }
        }
        Op::PairSum(p, q) => {
            let (n, m, h) = (
                nodes[*p].value.rows(),
                nodes[*q].value.rows(),
                nodes[*p].value.cols(),
            );
            if let Some(gp) = acc(nodes, grads, *p) {
                for i in 0..n {
                    for j in 0..m {
                        let row = &g[(i * m + j) * h..(i * m + j + 1) * h];
                        gp[i * h..(i + 1) * h]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            if let Some(gq) = acc(nodes, grads, *q) {
                for i in 0..n {
                    for j in 0..m {
                        let row = &g[(i * m + j) * h..(i * m + j + 1) * h];
                        gq[j * h..(j + 1) * h]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        Op::RowNormalize(x, fallback) => {
            let xv = Rc::clone(&nodes[*x].value);
            let cols = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..out.rows() {
                    if fallback[r] {
                        continue;
                    }
                    let s: f64 = xv.row_slice(r).iter().sum();
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = out.row_slice(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] += (gr[c] - dot) / s;
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let rows = geom.n * geom.ho * geom.wo;
            let kk = geom.k * geom.k * geom.c_in;
            if let Some(gw) = acc(nodes, grads, *weight) {
                gemm(kk, rows, geom.c_out, cols, true, g, false, gw, 1.0);
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for (i, v) in g.iter().enumerate() {
                    gb[i % geom.c_out] += v;
                }
            }
            let wv = Rc::clone(&nodes[*weight].value);
            if let Some(gx) = acc(nodes, grads, *input) {
                let mut dcols = vec![0.0; rows * kk];
                gemm(rows, geom.c_out, kk, g, false, wv.data(), true, &mut dcols, 0.0);
                col2im(&dcols, geom, gx);
            }
        }
        Op::MaxPool2(x, argmax) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        n,
        h: _,
        w,
        c_in,
        k,
        ho,
        wo,
        ..
    } = *geom;
    let kk = k * k * c_in;
    let h = geom.h;
    let mut cols = vec![0.0; n * ho * wo * kk];
    for s in 0..n {
        let img = &x[s * h * w * c_in..(s + 1) * h * w * c_in];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((s * ho + oy) * wo + ox) * kk;
                let mut p = row;
                for ky in 0..k {
                    let base = ((oy + ky) * w + ox) * c_in;
                    let span = k * c_in;
                    cols[p..p + span].copy_from_slice(&img[base..base + span]);
                    p += span;
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], geom: &ConvGeom, gx: &mut [f64]) {
    let ConvGeom {
        n,
        h,
        w,
        c_in,
        k,
        ho,
        wo,
        ..
    } = *geom;
    let kk = k * k * c_in;
    for s in 0..n {
        let img = &mut gx[s * h * w * c_in..(s + 1) * h * w * c_in];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((s * ho + oy) * wo + ox) * kk;
                let mut p = row;
                for ky in 0..k {
                    let base = ((oy + ky) * w + ox) * c_in;
                    let span = k * c_in;
                    img[base..base + span]
                        .iter_mut()
                        .zip(&dcols[p..p + span])
                        .for_each(|(a, b)| *a += b);
                    p += span;
                }
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// First element of the value; intended for scalar outputs.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().matmul(&other.value()).expect("matmul shapes");
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// Matrix product whose every output entry sums its terms in an order
    /// fixed by the term values alone, so permuting the inner index (rows of
    /// `other` with the matching columns of `self`) leaves the result
    /// bit-identical. Zero entries of `self` are skipped.
    pub fn aggregate(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.cols(), b.rows(), "aggregate shapes");
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut data = vec![0.0; m * n];
        let mut order: Vec<usize> = Vec::with_capacity(k);
        for i in 0..m {
            let ai = a.row_slice(i);
            order.clear();
            order.extend((0..k).filter(|&j| ai[j] != 0.0));
            order.sort_by(|&x, &y| {
                ai[x].total_cmp(&ai[y]).then_with(|| {
                    let (bx, by) = (b.row_slice(x), b.row_slice(y));
                    bx.iter()
                        .zip(by)
                        .map(|(p, q)| p.total_cmp(q))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            });
            let row = &mut data[i * n..(i + 1) * n];
            for &j in &order {
                let w = ai[j];
                row.iter_mut().zip(b.row_slice(j)).for_each(|(o, v)| *o += w * v);
            }
        }
        let v = Tensor::new(&[m, n], data).expect("shape");
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = zip(&self.value(), &other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = zip(&self.value(), &other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = zip(&self.value(), &other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let v = zip(&self.value(), &other.value(), |a, b| a / b);
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let b = bias.value();
        let n = b.len();
        assert_eq!(x.cols(), n, "add_row width");
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        let v = Tensor::new(x.shape(), data).expect("shape");
        self.binary(bias, v, Op::AddRow(self.id, bias.id))
    }

    /// Multiplies every element by a single-element variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let sv = s.value().data()[0];
        let v = map(&self.value(), |a| a * sv);
        self.binary(s, v, Op::MulScalar(self.id, s.id))
    }

    /// Scales each row `i` by `col[i]` where `col` is `rows x 1`.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let x = self.value();
        let c = col.value();
        assert_eq!(c.len(), x.rows(), "mul_col height");
        let w = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * c.data()[i / w])
            .collect();
        let v = Tensor::new(x.shape(), data).expect("shape");
        self.binary(col, v, Op::MulCol(self.id, col.id))
    }

    pub fn div_col(self, col: Var<'t>) -> Var<'t> {
        let x = self.value();
        let c = col.value();
        assert_eq!(c.len(), x.rows(), "div_col height");
        let w = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / c.data()[i / w])
            .collect();
        let v = Tensor::new(x.shape(), data).expect("shape");
        self.binary(col, v, Op::DivCol(self.id, col.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = map(&self.value(), |a| a * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = map(&self.value(), |a| a + c);
        self.unary(v, Op::AddConst(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = map(&self.value(), f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = map(&self.value(), f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = map(&self.value(), |a| a.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = map(&self.value(), sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        let v = map(&self.value(), softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = map(&self.value(), |a| a * a);
        self.unary(v, Op::Square(self.id))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = map(&self.value(), |a| a.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-row sums, `rows x 1`.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        let data = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
        let v = Tensor::new(&[x.rows(), 1], data).expect("shape");
        self.unary(v, Op::SumRows(self.id))
    }

    /// Column concatenation of 2-D values with equal row counts.
    pub fn hcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == rows), "hcat rows");
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let needs = parts.iter().any(|p| tape.needs(p.id));
        let value = Tensor::new(&[rows, total], data).expect("shape");
        tape.push(value, Op::HCat(parts.iter().map(|p| p.id).collect()), needs)
    }

    /// Row concatenation of 2-D values with equal column counts.
    pub fn vcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let cols = vals[0].cols();
        assert!(vals.iter().all(|v| v.cols() == cols), "vcat cols");
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|p| tape.needs(p.id));
        let value = Tensor::new(&[rows, cols], data).expect("shape");
        tape.push(value, Op::VCat(parts.iter().map(|p| p.id).collect()), needs)
    }

    pub fn rows(self, idx: &[usize]) -> Var<'t> {
        let v = self.value().select_rows(idx);
        self.unary(v, Op::Rows(self.id, idx.to_vec()))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn cols(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let w = end - start;
        let mut data = Vec::with_capacity(x.rows() * w);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let v = Tensor::new(&[x.rows(), w], data).expect("shape");
        self.unary(v, Op::Cols(self.id, start, end))
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        let x = self.value();
        let w = x.len();
        let mut data = Vec::with_capacity(n * w);
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let v = Tensor::new(&[n, w], data).expect("shape");
        self.unary(v, Op::BroadcastRows(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape).expect("reshape");
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::new(&[x.rows(), cols], data).expect("shape");
        self.unary(v, Op::LogSoftmax(self.id))
    }

    /// Selects column `idx[r]` from each row `r`, giving `rows x 1`.
    pub fn pick(self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(idx.len(), x.rows(), "pick length");
        let data = idx.iter().enumerate().map(|(r, &c)| x.at(r, c)).collect();
        let v = Tensor::new(&[x.rows(), 1], data).expect("shape");
        self.unary(v, Op::Pick(self.id, idx.to_vec()))
    }

    /// Pairwise squared Euclidean distances between the rows of two matrices.
    pub fn sq_dist(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.cols(), b.cols(), "sq_dist width");
        let (n, m) = (a.rows(), b.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = a.row_slice(i);
            for j in 0..m {
                let bj = b.row_slice(j);
                data.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let v = Tensor::new(&[n, m], data).expect("shape");
        self.binary(other, v, Op::SqDist(self.id, other.id))
    }

    /// Row `i * m + j` of the result is `self[i] + other[j]`.
    pub fn pair_sum(self, other: Var<'t>) -> Var<'t> {
        let (p, q) = (self.value(), other.value());
        assert_eq!(p.cols(), q.cols(), "pair_sum width");
        let (n, m, h) = (p.rows(), q.rows(), p.cols());
        let mut data = Vec::with_capacity(n * m * h);
        for i in 0..n {
            let pi = p.row_slice(i);
            for j in 0..m {
                data.extend(pi.iter().zip(q.row_slice(j)).map(|(a, b)| a + b));
            }
        }
        let v = Tensor::new(&[n * m, h], data).expect("shape");
        self.binary(other, v, Op::PairSum(self.id, other.id))
    }

    /// Divides each row by its sum. Rows whose sum is not strictly positive
    /// fall back to uniform weights (constant, no gradient).
    pub fn row_normalize(self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut fallback = vec![false; x.rows()];
        let mut data = Vec::with_capacity(x.len());
        for (r, fb) in fallback.iter_mut().enumerate() {
            let row = x.row_slice(r);
            let s: f64 = row.iter().sum();
            if s > 0.0 && s.is_finite() {
                data.extend(row.iter().map(|v| v / s));
            } else {
                warn!("row {r} has no positive weight; using uniform weights");
                *fb = true;
                data.extend(std::iter::repeat_n(1.0 / cols as f64, cols));
            }
        }
        let v = Tensor::new(x.shape(), data).expect("shape");
        self.unary(v, Op::RowNormalize(self.id, fallback))
    }

    /// Valid 2-D convolution, stride 1, NHWC input `[n, h, w, c_in]`.
    /// `weight` is `[k * k * c_in, c_out]` with rows ordered `(ky, kx, c)`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, k: usize) -> Var<'t> {
        let x = self.value();
        let wv = weight.value();
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d expects NHWC input");
        let (n, h, w, c_in) = (s[0], s[1], s[2], s[3]);
        assert!(h >= k && w >= k, "conv2d input smaller than kernel");
        let c_out = wv.cols();
        assert_eq!(wv.rows(), k * k * c_in, "conv2d weight rows");
        let geom = ConvGeom {
            n,
            h,
            w,
            c_in,
            k,
            c_out,
            ho: h - k + 1,
            wo: w - k + 1,
        };
        let cols = im2col(x.data(), &geom);
        let rows = n * geom.ho * geom.wo;
        let mut out = vec![0.0; rows * c_out];
        let b = bias.value();
        for r in 0..rows {
            out[r * c_out..(r + 1) * c_out].copy_from_slice(b.data());
        }
        gemm(rows, k * k * c_in, c_out, &cols, false, wv.data(), false, &mut out, 1.0);
        let v = Tensor::new(&[n, geom.ho, geom.wo, c_out], out).expect("shape");
        let needs = [self.id, weight.id, bias.id]
            .iter()
            .any(|&i| self.tape.needs(i));
        self.tape.push(
            v,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                geom,
                cols,
            },
            needs,
        )
    }

    /// 2x2 max pooling with stride 2 on NHWC input; odd trailing rows and
    /// columns are dropped.
    pub fn max_pool2(self) -> Var<'t> {
        let x = self.value();
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * ho * wo * c);
        let mut argmax = Vec::with_capacity(n * ho * wo * c);
        let d = x.data();
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if d[idx] > best_v || best == usize::MAX {
                                    best_v = d[idx];
                                    best = idx;
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let v = Tensor::new(&[n, ho, wo, c], out).expect("shape");
        self.unary(v, Op::MaxPool2(self.id, argmax))
    }
}
