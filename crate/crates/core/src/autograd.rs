//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into the [`ParamStore`] parameters that were read onto it.
//!
//! Binary element-wise operations broadcast rank-2 operands whose
//! dimensions are either equal or 1.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    SumAll(usize),
    SumAxis(usize, usize),
    MaxAxis {
        src: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Maximum(usize, usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Softplus(usize),
    Powf(usize, f64),
    Clamp(usize, f64, f64),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm {
        src: usize,
        rstd: Vec<f64>,
    },
    GatherRows {
        src: usize,
        index: Vec<usize>,
    },
    SqDist(usize, usize),
    SegmentMax {
        src: usize,
        argmax: Vec<Option<usize>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`, zero if `var` did not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.value().dims();
                Tensor::zeros(r, c)
            }
        }
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant or input. Its gradient is available through [`Tape::gradients`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter onto the tape. Repeated reads share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let nodes = self.nodes.borrow();
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| nodes[p.id].value.dims()).collect();
        let (r0, c0) = dims[0];
        let value = if axis == 0 {
            if let Some(bad) = dims.iter().find(|d| d.1 != c0) {
                return Err(Error::shape_pair("concat rows", &[r0, c0], &[bad.0, bad.1]));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.data());
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            if let Some(bad) = dims.iter().find(|d| d.0 != r0) {
                return Err(Error::shape_pair("concat cols", &[r0, c0], &[bad.0, bad.1]));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        drop(nodes);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Reverse sweep from a scalar, returning gradients for every node.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates d(loss)/d(param) into every parameter read onto this tape.
    /// Parameters the loss does not depend on are left untouched.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        let nodes = self.nodes.borrow();
        for (node, g) in nodes.iter().zip(&grads.grads) {
            if let (Op::Param(pid), Some(g)) = (&node.op, g) {
                store.get_mut(*pid).accumulate(g);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_dims(op: &str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let r = if ar == br || br == 1 {
        ar
    } else if ar == 1 {
        br
    } else {
        return Err(Error::shape_pair(op, a.shape(), b.shape()));
    };
    let c = if ac == bc || bc == 1 {
        ac
    } else if ac == 1 {
        bc
    } else {
        return Err(Error::shape_pair(op, a.shape(), b.shape()));
    };
    Ok((r, c))
}

fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    r: usize,
    c: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i * ac };
        let bi = if br == 1 { 0 } else { i * bc };
        for j in 0..c {
            let av = ad[ai + if ac == 1 { 0 } else { j }];
            let bv = bd[bi + if bc == 1 { 0 } else { j }];
            out.push(f(av, bv));
        }
    }
    Tensor::matrix(r, c, out).expect("broadcast dims")
}

/// Sums a full-size gradient down to the operand's (possibly broadcast) shape.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    let (tr, tc) = target.dims();
    let (gr, gc) = g.dims();
    if (tr, tc) == (gr, gc) {
        let mut out = g.clone();
        if out.shape() != target.shape() {
            out = Tensor::new(target.shape().to_vec(), out.into_data()).expect("same size");
        }
        return out;
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..gr {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g.get(i, j);
        }
    }
    Tensor::new(target.shape().to_vec(), out).expect("target size")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = a.dims();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::matrix(r, c, data).expect("same dims")
}

fn with_shape(t: Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::new(like.shape().to_vec(), t.into_data()).expect("same size")
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, reduce_to(g, val(*a)));
            accumulate(grads, *b, reduce_to(g, val(*b)));
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, reduce_to(g, val(*a)));
            accumulate(grads, *b, reduce_to(&g.map(|v| -v), val(*b)));
        }
        Op::Mul(a, b) => {
            let (r, c) = g.dims();
            let ga = broadcast_zip(g, val(*b), r, c, |x, y| x * y);
            let gb = broadcast_zip(g, val(*a), r, c, |x, y| x * y);
            accumulate(grads, *a, reduce_to(&ga, val(*a)));
            accumulate(grads, *b, reduce_to(&gb, val(*b)));
        }
        Op::Div(a, b) => {
            let (r, c) = g.dims();
            let ga = broadcast_zip(g, val(*b), r, c, |x, y| x / y);
            // d(a/b)/db = -out / b
            let ob = broadcast_zip(out, val(*b), r, c, |o, y| -o / y);
            let gb = zip_map(g, &ob, |x, y| x * y);
            accumulate(grads, *a, reduce_to(&ga, val(*a)));
            accumulate(grads, *b, reduce_to(&gb, val(*b)));
        }
        Op::AddScalar(a) => accumulate(grads, *a, with_shape(g.clone(), val(*a))),
        Op::Scale(a, s) => accumulate(grads, *a, with_shape(g.map(|v| v * s), val(*a))),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.matmul(&bv.transpose()).expect("matmul grad");
            let gb = av.transpose().matmul(g).expect("matmul grad");
            accumulate(grads, *a, with_shape(ga, av));
            accumulate(grads, *b, with_shape(gb, bv));
        }
        Op::Transpose(a) => accumulate(grads, *a, with_shape(g.transpose(), val(*a))),
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for &p in parts {
                let (pr, pc) = val(p).dims();
                let piece = if *axis == 0 {
                    let c = g.cols();
                    Tensor::matrix(pr, pc, g.data()[offset * c..(offset + pr) * c].to_vec())
                } else {
                    let mut data = Vec::with_capacity(pr * pc);
                    for r in 0..pr {
                        data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                    }
                    Tensor::matrix(pr, pc, data)
                }
                .expect("concat grad");
                offset += if *axis == 0 { pr } else { pc };
                accumulate(grads, p, with_shape(piece, val(p)));
            }
        }
        Op::Slice { src, axis, start } => {
            let sv = val(*src);
            let (sr, sc) = sv.dims();
            let mut full = Tensor::zeros(sr, sc);
            let (gr, gc) = g.dims();
            for i in 0..gr {
                for j in 0..gc {
                    let (ri, cj) = if *axis == 0 {
                        (i + start, j)
                    } else {
                        (i, j + start)
                    };
                    full.set(ri, cj, g.get(i, j));
                }
            }
            accumulate(grads, *src, with_shape(full, sv));
        }
        Op::SumAll(a) => {
            let av = val(*a);
            let (r, c) = av.dims();
            accumulate(grads, *a, with_shape(Tensor::full(r, c, g.item()), av));
        }
        Op::SumAxis(a, axis) => {
            let av = val(*a);
            let (r, c) = av.dims();
            debug_assert!(*axis < 2);
            let expanded = broadcast_zip(&Tensor::zeros(r, c), g, r, c, |_, y| y);
            accumulate(grads, *a, with_shape(expanded, av));
        }
        Op::MaxAxis { src, axis, argmax } => {
            let sv = val(*src);
            let (r, c) = sv.dims();
            let mut full = Tensor::zeros(r, c);
            for (k, &arg) in argmax.iter().enumerate() {
                let (i, j) = if *axis == 0 { (arg, k) } else { (k, arg) };
                full.set(i, j, g.data()[k]);
            }
            accumulate(grads, *src, with_shape(full, sv));
        }
        Op::Maximum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (r, c) = g.dims();
            let ga = broadcast_zip(av, bv, r, c, |x, y| if x >= y { 1.0 } else { 0.0 });
            let ga = zip_map(g, &ga, |x, m| x * m);
            let gb = zip_map(g, &ga, |x, y| x - y);
            accumulate(grads, *a, reduce_to(&ga, av));
            accumulate(grads, *b, reduce_to(&gb, bv));
        }
        Op::Exp(a) => accumulate(
            grads,
            *a,
            with_shape(zip_map(g, out, |x, o| x * o), val(*a)),
        ),
        Op::Ln(a) => accumulate(
            grads,
            *a,
            with_shape(zip_map(g, val(*a), |x, v| x / v), val(*a)),
        ),
        Op::Tanh(a) => accumulate(
            grads,
            *a,
            with_shape(zip_map(g, out, |x, o| x * (1.0 - o * o)), val(*a)),
        ),
        Op::Sigmoid(a) => accumulate(
            grads,
            *a,
            with_shape(zip_map(g, out, |x, o| x * o * (1.0 - o)), val(*a)),
        ),
        Op::Relu(a) => accumulate(
            grads,
            *a,
            with_shape(
                zip_map(g, val(*a), |x, v| if v > 0.0 { x } else { 0.0 }),
                val(*a),
            ),
        ),
        Op::Gelu(a) => accumulate(
            grads,
            *a,
            with_shape(zip_map(g, val(*a), |x, v| x * gelu_grad(v)), val(*a)),
        ),
        Op::Softplus(a) => accumulate(
            grads,
            *a,
            with_shape(zip_map(g, val(*a), |x, v| x * sigmoid(v)), val(*a)),
        ),
        Op::Powf(a, p) => accumulate(
            grads,
            *a,
            with_shape(zip_map(g, val(*a), |x, v| x * p * v.powf(p - 1.0)), val(*a)),
        ),
        Op::Clamp(a, lo, hi) => accumulate(
            grads,
            *a,
            with_shape(
                zip_map(
                    g,
                    val(*a),
                    |x, v| if v >= *lo && v <= *hi { x } else { 0.0 },
                ),
                val(*a),
            ),
        ),
        Op::Softmax(a, axis) => {
            // dx = y * (g - sum(g * y))
            let gy = zip_map(g, out, |x, y| x * y);
            let s = sum_axis(&gy, *axis);
            let (r, c) = out.dims();
            let centered = broadcast_zip(g, &s, r, c, |x, t| x - t);
            accumulate(
                grads,
                *a,
                with_shape(zip_map(&centered, out, |x, y| x * y), val(*a)),
            );
        }
        Op::LogSoftmax(a, axis) => {
            // dx = g - softmax * sum(g)
            let s = sum_axis(g, *axis);
            let (r, c) = out.dims();
            let sm = out.map(f64::exp);
            let scaled = broadcast_zip(&sm, &s, r, c, |p, t| p * t);
            accumulate(
                grads,
                *a,
                with_shape(zip_map(g, &scaled, |x, y| x - y), val(*a)),
            );
        }
        Op::LayerNorm { src, rstd } => {
            let (r, c) = out.dims();
            let n = c as f64;
            let mut dx = Vec::with_capacity(r * c);
            for i in 0..r {
                let gi = g.row(i);
                let xi = out.row(i);
                let sum_g: f64 = gi.iter().sum();
                let sum_gx: f64 = gi.iter().zip(xi).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx.push(rstd[i] / n * (n * gi[j] - sum_g - xi[j] * sum_gx));
                }
            }
            let dx = Tensor::matrix(r, c, dx).expect("layer norm grad");
            accumulate(grads, *src, with_shape(dx, val(*src)));
        }
        Op::GatherRows { src, index } => {
            let sv = val(*src);
            let (sr, sc) = sv.dims();
            let mut full = vec![0.0; sr * sc];
            for (k, &row) in index.iter().enumerate() {
                for (f, gv) in full[row * sc..(row + 1) * sc].iter_mut().zip(g.row(k)) {
                    *f += gv;
                }
            }
            accumulate(
                grads,
                *src,
                with_shape(Tensor::matrix(sr, sc, full).expect("gather grad"), sv),
            );
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, d) = av.dims();
            let m = bv.rows();
            let mut ga = vec![0.0; n * d];
            let mut gb = vec![0.0; m * d];
            for i in 0..n {
                let ai = av.row(i);
                for j in 0..m {
                    let w = 2.0 * g.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let bj = bv.row(j);
                    for k in 0..d {
                        let diff = w * (ai[k] - bj[k]);
                        ga[i * d + k] += diff;
                        gb[j * d + k] -= diff;
                    }
                }
            }
            accumulate(
                grads,
                *a,
                with_shape(Tensor::matrix(n, d, ga).expect("sqdist grad"), av),
            );
            accumulate(
                grads,
                *b,
                with_shape(Tensor::matrix(m, d, gb).expect("sqdist grad"), bv),
            );
        }
        Op::SegmentMax { src, argmax } => {
            let sv = val(*src);
            let (sr, sc) = sv.dims();
            let mut full = vec![0.0; sr * sc];
            for (k, arg) in argmax.iter().enumerate() {
                if let Some(row) = arg {
                    full[row * sc + k % sc] += g.data()[k];
                }
            }
            accumulate(
                grads,
                *src,
                with_shape(Tensor::matrix(sr, sc, full).expect("segment grad"), sv),
            );
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sum_axis(t: &Tensor, axis: usize) -> Tensor {
    let (r, c) = t.dims();
    if axis == 0 {
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        Tensor::matrix(1, c, out).expect("sum dims")
    } else {
        let out = (0..r).map(|i| t.row(i).iter().sum()).collect();
        Tensor::matrix(r, 1, out).expect("sum dims")
    }
}

/// Per-lane max of a matrix along `axis`; ties resolve to the lowest index.
fn max_axis(t: &Tensor, axis: usize) -> (Tensor, Vec<usize>) {
    let (r, c) = t.dims();
    let (lanes, len) = if axis == 0 { (c, r) } else { (r, c) };
    let mut vals = Vec::with_capacity(lanes);
    let mut args = Vec::with_capacity(lanes);
    for lane in 0..lanes {
        let at = |k: usize| {
            if axis == 0 {
                t.get(k, lane)
            } else {
                t.get(lane, k)
            }
        };
        let mut best = 0;
        for k in 1..len {
            if at(k) > at(best) {
                best = k;
            }
        }
        vals.push(at(best));
        args.push(best);
    }
    let shape = if axis == 0 { (1, c) } else { (r, 1) };
    (
        Tensor::matrix(shape.0, shape.1, vals).expect("max dims"),
        args,
    )
}

fn softmax_rows(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let src = if axis == 0 { t.transpose() } else { t.clone() };
    let (r, c) = src.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = src.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        if log {
            let lz = z.ln();
            out.extend(row.iter().map(|v| v - m - lz));
        } else {
            out.extend(row.iter().map(|v| (v - m).exp() / z));
        }
    }
    let res = Tensor::matrix(r, c, out).expect("softmax dims");
    if axis == 0 {
        res.transpose()
    } else {
        res
    }
}

fn check_axis(axis: usize) {
    assert!(axis < 2, "axis must be 0 or 1, got {axis}");
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.value().dims()
    }

    /// Scalar value; panics unless the tensor has one element.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.value());
        self.tape.push(v, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            let (r, c) = broadcast_dims(name, &a, &b)?;
            broadcast_zip(&a, &b, r, c, f)
        };
        Ok(self.tape.push(v, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Element-wise maximum. Where equal, the gradient goes to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "maximum",
            |a, b| if a >= b { a } else { b },
            Op::Maximum(self.id, other.id),
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|v| v + s))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |t| t.map(|v| v * s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        check_axis(axis);
        let v = {
            let src = self.value();
            let (r, c) = src.dims();
            let extent = if axis == 0 { r } else { c };
            if start + len > extent {
                return Err(Error::Shape(format!(
                    "slice [{start}, {}) out of range on axis {axis} of {:?}",
                    start + len,
                    src.shape()
                )));
            }
            if axis == 0 {
                Tensor::matrix(len, c, src.data()[start * c..(start + len) * c].to_vec())?
            } else {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&src.row(i)[start..start + len]);
                }
                Tensor::matrix(r, len, data)?
            }
        };
        Ok(self.tape.push(
            v,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |t| {
            Tensor::scalar(t.data().iter().sum())
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        check_axis(axis);
        self.unary(Op::SumAxis(self.id, axis), |t| sum_axis(t, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let (r, c) = self.dims();
        let n = if axis == 0 { r } else { c };
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    /// Max along `axis` with the winning indices. Ties go to the lowest index.
    pub fn max_axis(self, axis: usize) -> (Var<'t>, Vec<usize>) {
        check_axis(axis);
        let (v, argmax) = max_axis(&self.value(), axis);
        let var = self.tape.push(
            v,
            Op::MaxAxis {
                src: self.id,
                axis,
                argmax: argmax.clone(),
            },
        );
        (var, argmax)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |t| t.map(f64::ln))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |t| t.map(|v| v.max(0.0)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |t| t.map(gelu))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |t| t.map(softplus))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p), |t| t.map(|v| v.powf(p)))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |t| t.map(|v| v.clamp(lo, hi)))
    }

    pub fn softmax(self, axis: usize) -> Var<'t> {
        check_axis(axis);
        self.unary(Op::Softmax(self.id, axis), |t| softmax_rows(t, axis, false))
    }

    pub fn log_softmax(self, axis: usize) -> Var<'t> {
        check_axis(axis);
        self.unary(Op::LogSoftmax(self.id, axis), |t| {
            softmax_rows(t, axis, true)
        })
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (v, rstd) = {
            let t = self.value();
            let (r, c) = t.dims();
            let mut out = Vec::with_capacity(r * c);
            let mut rstd = Vec::with_capacity(r);
            for i in 0..r {
                let row = t.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd.push(s);
                out.extend(row.iter().map(|x| (x - mean) * s));
            }
            (Tensor::matrix(r, c, out).expect("layer norm dims"), rstd)
        };
        self.tape.push(v, Op::LayerNorm { src: self.id, rstd })
    }

    /// Row lookup (embedding tables, neighbour gathering, reordering).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let v = {
            let t = self.value();
            let (r, c) = t.dims();
            if let Some(&bad) = index.iter().find(|&&i| i >= r) {
                return Err(Error::Shape(format!(
                    "row index {bad} out of range for {:?}",
                    t.shape()
                )));
            }
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(index.len(), c, data)?
        };
        Ok(self.tape.push(
            v,
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Squared Euclidean distance between every row of `self` and every row of `other`.
    pub fn sq_dist(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.cols() != b.cols() {
                return Err(Error::shape_pair("sq_dist", a.shape(), b.shape()));
            }
            let (n, m) = (a.rows(), b.rows());
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let ai = a.row(i);
                for j in 0..m {
                    out.push(
                        ai.iter()
                            .zip(b.row(j))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum(),
                    );
                }
            }
            Tensor::matrix(n, m, out)?
        };
        Ok(self.tape.push(v, Op::SqDist(self.id, other.id)))
    }

    /// Column-wise max over groups of rows: output row `s` is the max of the
    /// rows `r` with `segment[r] == s`. Empty segments produce zeros.
    pub fn segment_max(self, segment: &[usize], num_segments: usize) -> Result<Var<'t>> {
        let (v, argmax) = {
            let t = self.value();
            let (r, c) = t.dims();
            if segment.len() != r {
                return Err(Error::Shape(format!(
                    "segment_max: {} segment ids for {:?}",
                    segment.len(),
                    t.shape()
                )));
            }
            if let Some(&bad) = segment.iter().find(|&&s| s >= num_segments) {
                return Err(Error::Shape(format!("segment id {bad} >= {num_segments}")));
            }
            let mut out = vec![0.0; num_segments * c];
            let mut argmax: Vec<Option<usize>> = vec![None; num_segments * c];
            for (row, &s) in segment.iter().enumerate() {
                for (j, &x) in t.row(row).iter().enumerate() {
                    let k = s * c + j;
                    if argmax[k].is_none() || x > out[k] {
                        out[k] = x;
                        argmax[k] = Some(row);
                    }
                }
            }
            (Tensor::matrix(num_segments, c, out)?, argmax)
        };
        Ok(self.tape.push(
            v,
            Op::SegmentMax {
                src: self.id,
                argmax,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 3));
        let y = x.softmax(1);
        for v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn squared_distance_three_four_five() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let k = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0]]));
        assert_eq!(q.sq_dist(k).unwrap().item(), 25.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row_vector(vec![0.3, -1.0, 2.0]));
        let tape = Tape::new();
        let loss = tape.param(&store, p).sum();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.as_ref().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row_vector(vec![1.0, 2.0]));
        let tape = Tape::new();
        let pv = tape.param(&store, p);
        let loss = pv.mul(pv).unwrap().sum();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_parameter_reads_zero() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(2.0));
        let unused = store.add("unused", Tensor::row_vector(vec![1.0, 1.0]));
        let tape = Tape::new();
        let _ = tape.param(&store, unused);
        let loss = tape.param(&store, used).scale(3.0);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(used).grad.as_ref().unwrap().item(), 3.0);
        assert_eq!(store.get(unused).grad_or_zero().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.5));
        for _ in 0..2 {
            let tape = Tape::new();
            let v = tape.param(&store, p);
            let loss = v.add(v).unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(p).grad.as_ref().unwrap().item(), 4.0);
    }

    #[test]
    fn max_routes_gradient_to_lowest_tied_index() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[
            vec![1.0, 3.0, 3.0],
            vec![2.0, 2.0, -1.0],
        ]));
        let (m, arg) = x.max_axis(1);
        assert_eq!(arg, vec![1, 0]);
        let grads = tape.gradients(m.sum()).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(3, 2));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn segment_max_empty_segment_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -4.0], vec![2.0, -5.0]]));
        let y = x.segment_max(&[0, 0], 2).unwrap();
        assert_eq!(y.value().data(), &[2.0, -4.0, 0.0, 0.0]);
    }
}
