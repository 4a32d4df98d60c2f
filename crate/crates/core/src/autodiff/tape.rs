//! Append-only gradient tape.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its inputs. `backward` walks the nodes in reverse append order exactly once,
//! accumulating gradients additively across fan-out.

use std::cell::{Ref, RefCell};
use std::f64::consts::PI;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    /// Keeps `GELU'(x)` from the forward pass.
    Gelu { x: usize, slope: Vec<S> },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose12 {
        x: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    CausalMix {
        packed: usize,
        y: usize,
        batch: usize,
        t: usize,
        d: usize,
    },
    Stack {
        parts: Vec<usize>,
        rows: usize,
        d: usize,
    },
    Select {
        x: usize,
        rows: usize,
        t: usize,
        d: usize,
        index: usize,
    },
    Concat {
        a: usize,
        b: usize,
        rows: usize,
        p: usize,
        q: usize,
    },
    BroadcastRows {
        v: usize,
        rows: usize,
    },
    Cat0 {
        parts: Vec<usize>,
    },
    Slice0 {
        x: usize,
        start: usize,
    },
    GaussianLogProb {
        mean: usize,
        log_std: usize,
        value: usize,
        rows: usize,
        d: usize,
    },
    Expectile {
        x: usize,
        tau: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Record of primitive operations for one forward/backward pass.
///
/// A tape belongs to one execution context; create a fresh tape per step.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backprop(&nodes, &mut grads, &node.op, &g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn slot<'g, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'g mut [Option<Vec<S>>],
    id: usize,
) -> Option<&'g mut Vec<S>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); n]))
}

fn backprop<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    op: &Op<S>,
    g: &[S],
) {
    let val = |id: usize| nodes[id].value.data();
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                // da += g · bᵀ
                unsafe {
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g.as_ptr(),
                        n as isize,
                        1,
                        val(b).as_ptr(),
                        1,
                        n as isize,
                        S::one(),
                        da.as_mut_ptr(),
                        k as isize,
                        1,
                    )
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                // db += aᵀ · g
                unsafe {
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        val(a).as_ptr(),
                        1,
                        k as isize,
                        g.as_ptr(),
                        n as isize,
                        1,
                        S::one(),
                        db.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            inp,
            out: o,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                unsafe {
                    S::gemm(
                        rows,
                        o,
                        inp,
                        S::one(),
                        g.as_ptr(),
                        o as isize,
                        1,
                        val(w).as_ptr(),
                        1,
                        o as isize,
                        S::one(),
                        dx.as_mut_ptr(),
                        inp as isize,
                        1,
                    )
                }
            }
            if let Some(dw) = slot(nodes, grads, w) {
                unsafe {
                    S::gemm(
                        inp,
                        rows,
                        o,
                        S::one(),
                        val(x).as_ptr(),
                        1,
                        inp as isize,
                        g.as_ptr(),
                        o as isize,
                        1,
                        S::one(),
                        dw.as_mut_ptr(),
                        o as isize,
                        1,
                    )
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for r in 0..rows {
                    for (d, gv) in db.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                        *d += *gv;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [a, b] {
                if let Some(d) = slot(nodes, grads, id) {
                    for (d, gv) in d.iter_mut().zip(g) {
                        *d += *gv;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, a) {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d += *gv;
                }
            }
            if let Some(d) = slot(nodes, grads, b) {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d -= *gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(nodes, grads, a) {
                for ((d, gv), bv) in d.iter_mut().zip(g).zip(val(b)) {
                    *d += *gv * *bv;
                }
            }
            if let Some(d) = slot(nodes, grads, b) {
                for ((d, gv), av) in d.iter_mut().zip(g).zip(val(a)) {
                    *d += *gv * *av;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, a) {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d += *gv * c;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, a) {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d += *gv;
                }
            }
        }
        Op::Gelu { x: a, ref slope } => {
            if let Some(d) = slot(nodes, grads, a) {
                for ((d, gv), &k) in d.iter_mut().zip(g).zip(slope) {
                    *d += *gv * k;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            ref xhat,
            ref rstd,
        } => {
            let rows = xhat.len() / d;
            if let Some(dg) = slot(nodes, grads, gain) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, bias) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
            let gain_v = val(gain);
            if let Some(dx) = slot(nodes, grads, x) {
                let inv_d = S::one() / S::of(d as f64);
                let mut dxhat = vec![S::zero(); d];
                for r in 0..rows {
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for j in 0..d {
                        dxhat[j] = g[r * d + j] * gain_v[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[r * d + j];
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    for j in 0..d {
                        dx[r * d + j] += rstd[r]
                            * (dxhat[j] - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, a) {
                for d in d.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(d) = slot(nodes, grads, a) {
                let s = g[0] / S::of(d.len() as f64);
                for d in d.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::Transpose12 {
            x,
            batch,
            rows,
            cols,
        } => {
            // out[b, c, r] = x[b, r, c]
            if let Some(d) = slot(nodes, grads, x) {
                for bi in 0..batch {
                    let base = bi * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            d[base + r * cols + c] += g[base + c * rows + r];
                        }
                    }
                }
            }
        }
        Op::CausalMix {
            packed,
            y,
            batch,
            t,
            d,
        } => {
            let yv = val(y);
            let pv = val(packed);
            if let Some(dp) = slot(nodes, grads, packed) {
                for bi in 0..batch {
                    let base = bi * t * d;
                    for m in 0..t {
                        let gm = &g[base + m * d..base + (m + 1) * d];
                        for n in 0..=m {
                            let yn = &yv[base + n * d..base + (n + 1) * d];
                            let mut acc = S::zero();
                            for c in 0..d {
                                acc += gm[c] * yn[c];
                            }
                            dp[m * (m + 1) / 2 + n] += acc;
                        }
                    }
                }
            }
            if let Some(dy) = slot(nodes, grads, y) {
                for bi in 0..batch {
                    let base = bi * t * d;
                    for m in 0..t {
                        for n in 0..=m {
                            let a = pv[m * (m + 1) / 2 + n];
                            for c in 0..d {
                                dy[base + n * d + c] += a * g[base + m * d + c];
                            }
                        }
                    }
                }
            }
        }
        Op::Stack { ref parts, rows, d } => {
            let t = parts.len();
            for (j, &p) in parts.iter().enumerate() {
                if let Some(dp) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        let src = &g[(r * t + j) * d..(r * t + j + 1) * d];
                        for (a, b) in dp[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *a += *b;
                        }
                    }
                }
            }
        }
        Op::Select {
            x,
            rows,
            t,
            d,
            index,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for r in 0..rows {
                    let dst = &mut dx[(r * t + index) * d..(r * t + index + 1) * d];
                    for (a, b) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += *b;
                    }
                }
            }
        }
        Op::Concat { a, b, rows, p, q } => {
            if let Some(da) = slot(nodes, grads, a) {
                for r in 0..rows {
                    for j in 0..p {
                        da[r * p + j] += g[r * (p + q) + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for r in 0..rows {
                    for j in 0..q {
                        db[r * q + j] += g[r * (p + q) + p + j];
                    }
                }
            }
        }
        Op::Cat0 { ref parts } => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(dp) = slot(nodes, grads, p) {
                    for (a, b) in dp.iter_mut().zip(&g[off..off + n]) {
                        *a += *b;
                    }
                }
                off += n;
            }
        }
        Op::Slice0 { x, start } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for (a, b) in dx[start..start + g.len()].iter_mut().zip(g) {
                    *a += *b;
                }
            }
        }
        Op::BroadcastRows { v, rows } => {
            if let Some(dv) = slot(nodes, grads, v) {
                let d = dv.len();
                for r in 0..rows {
                    for j in 0..d {
                        dv[j] += g[r * d + j];
                    }
                }
            }
        }
        Op::GaussianLogProb {
            mean,
            log_std,
            value,
            rows,
            d,
        } => {
            let mv = val(mean);
            let lv = val(log_std);
            let vv = val(value);
            let lo = S::of(LOG_STD_MIN);
            let hi = S::of(LOG_STD_MAX);
            let ls: Vec<S> = lv.iter().map(|&l| l.max(lo).min(hi)).collect();
            let inv_std: Vec<S> = ls.iter().map(|&l| (-l).exp()).collect();
            let mut zs = vec![S::zero(); rows * d];
            for r in 0..rows {
                for j in 0..d {
                    zs[r * d + j] = (vv[r * d + j] - mv[r * d + j]) * inv_std[j];
                }
            }
            if let Some(dm) = slot(nodes, grads, mean) {
                for r in 0..rows {
                    for j in 0..d {
                        dm[r * d + j] += g[r] * zs[r * d + j] * inv_std[j];
                    }
                }
            }
            if let Some(dv) = slot(nodes, grads, value) {
                for r in 0..rows {
                    for j in 0..d {
                        dv[r * d + j] -= g[r] * zs[r * d + j] * inv_std[j];
                    }
                }
            }
            if let Some(dl) = slot(nodes, grads, log_std) {
                for j in 0..d {
                    if lv[j] < lo || lv[j] > hi {
                        continue;
                    }
                    let mut acc = S::zero();
                    for r in 0..rows {
                        let z = zs[r * d + j];
                        acc += g[r] * (z * z - S::one());
                    }
                    dl[j] += acc;
                }
            }
        }
        Op::Expectile { x, tau } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let two = S::of(2.0);
                for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                    let w = if xv < S::zero() { S::one() - tau } else { tau };
                    *d += *gv * two * w * xv;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for leaf `v`; zero if `v` was not reached from the loss.
    /// Intermediate nodes release their gradient during the backward pass.
    pub fn get(&self, v: Var<'_, S>) -> Tensor<S> {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var<'_, S>) -> bool {
        self.grads[v.id].is_some()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> S {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(&[self.id])
    }

    /// Copy of this value as a constant leaf: no gradient flows back through it.
    pub fn detach(&self) -> Var<'t, S> {
        let v = self.value();
        self.tape.constant(v)
    }

    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t, S>, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let (m, k, n, out) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![S::zero(); m * n];
            unsafe {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    a.data().as_ptr(),
                    k as isize,
                    1,
                    b.data().as_ptr(),
                    n as isize,
                    1,
                    S::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                )
            };
            (m, k, n, out)
        };
        Ok(self.binary(
            other,
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// Affine map over the last dimension: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&self, w: &Var<'t, S>, b: &Var<'t, S>) -> Result<Var<'t, S>> {
        let (shape, rows, inp, o, out) = {
            let x = self.tape.value(self.id);
            let wv = self.tape.value(w.id);
            let bv = self.tape.value(b.id);
            let xs = x.shape();
            if xs.is_empty()
                || wv.shape().len() != 2
                || *xs.last().unwrap() != wv.shape()[0]
                || bv.shape() != [wv.shape()[1]]
            {
                return Err(Error::Shape(format!(
                    "linear: input {:?}, weight {:?}, bias {:?}",
                    xs,
                    wv.shape(),
                    bv.shape()
                )));
            }
            let inp = wv.shape()[0];
            let o = wv.shape()[1];
            let rows = x.len() / inp.max(1);
            let mut out = Vec::with_capacity(rows * o);
            for _ in 0..rows {
                out.extend_from_slice(bv.data());
            }
            unsafe {
                S::gemm(
                    rows,
                    inp,
                    o,
                    S::one(),
                    x.data().as_ptr(),
                    inp as isize,
                    1,
                    wv.data().as_ptr(),
                    o as isize,
                    1,
                    S::one(),
                    out.as_mut_ptr(),
                    o as isize,
                    1,
                )
            };
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = o;
            (shape, rows, inp, o, out)
        };
        let rg = self.tape.rg(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
                rows,
                inp,
                out: o,
            },
            rg,
        ))
    }

    fn zip_with(
        &self,
        other: &Var<'t, S>,
        name: &str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: S) -> Var<'t, S> {
        let v = self.tape.value(self.id).map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: S) -> Var<'t, S> {
        let v = self.tape.value(self.id).map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'t, S> {
        let (v, slope) = {
            let x = self.tape.value(self.id);
            let mut v = vec![S::zero(); x.len()];
            let mut slope = vec![S::zero(); x.len()];
            S::gelu_slice(x.data(), &mut v, &mut slope);
            (Tensor::new(x.shape().to_vec(), v).expect("same shape"), slope)
        };
        self.unary(v, Op::Gelu { x: self.id, slope })
    }

    /// Normalize over the last dimension, then apply `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t, S>, bias: &Var<'t, S>) -> Result<Var<'t, S>> {
        let (out, xhat, rstd, d) = {
            let x = self.tape.value(self.id);
            let gv = self.tape.value(gain.id);
            let bv = self.tape.value(bias.id);
            let d = x.shape().last().copied().unwrap_or(0);
            if d == 0 {
                return Err(Error::Shape(format!(
                    "layer_norm over an empty last dimension (shape {:?})",
                    x.shape()
                )));
            }
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm: input {:?}, gain {:?}, bias {:?}",
                    x.shape(),
                    gv.shape(),
                    bv.shape()
                )));
            }
            let rows = x.len() / d;
            let inv_d = S::one() / S::of(d as f64);
            let eps = S::of(LAYER_NORM_EPS);
            let mut xhat = vec![S::zero(); x.len()];
            let mut rstd = vec![S::zero(); rows];
            let mut out = vec![S::zero(); x.len()];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                let rs = S::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd, d)
        };
        let rg = self.tape.rg(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                d,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t, S> {
        let s = self.tape.value(self.id).data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, S> {
        let (s, n) = {
            let v = self.tape.value(self.id);
            (v.data().iter().copied().sum::<S>(), v.len())
        };
        self.unary(Tensor::scalar(s / S::of(n as f64)), Op::Mean(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// `[b, r, c] → [b, c, r]`.
    pub fn transpose12(&self) -> Result<Var<'t, S>> {
        let (out, batch, rows, cols) = {
            let x = self.tape.value(self.id);
            if x.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "transpose12 expects a rank-3 tensor, got {:?}",
                    x.shape()
                )));
            }
            let (batch, rows, cols) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let xd = x.data();
            let mut out = vec![S::zero(); x.len()];
            for b in 0..batch {
                let base = b * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        out[base + c * rows + r] = xd[base + r * cols + c];
                    }
                }
            }
            (
                Tensor::from_parts(vec![batch, cols, rows], out),
                batch,
                rows,
                cols,
            )
        };
        Ok(self.unary(
            out,
            Op::Transpose12 {
                x: self.id,
                batch,
                rows,
                cols,
            },
        ))
    }

    /// Lower-triangular token mixing: `self` is `[b, t, d]`, `packed` holds
    /// the `t(t+1)/2` entries `a_mn` (m ≥ n) row by row. Output token `m` is
    /// `Σ_{n≤m} a_mn · token_n`; tokens after `m` are never read.
    pub fn causal_mix(&self, packed: &Var<'t, S>) -> Result<Var<'t, S>> {
        let (out, batch, t, d) = {
            let y = self.tape.value(self.id);
            let p = self.tape.value(packed.id);
            if y.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "causal_mix expects [batch, tokens, dim], got {:?}",
                    y.shape()
                )));
            }
            let (batch, t, d) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            if p.shape() != [t * (t + 1) / 2] {
                return Err(Error::Shape(format!(
                    "causal_mix: mixer for {:?} entries does not match {} tokens",
                    p.shape(),
                    t
                )));
            }
            let yd = y.data();
            let pd = p.data();
            let mut out = vec![S::zero(); y.len()];
            for b in 0..batch {
                let base = b * t * d;
                for m in 0..t {
                    let dst = &mut out[base + m * d..base + (m + 1) * d];
                    for n in 0..=m {
                        let a = pd[m * (m + 1) / 2 + n];
                        let src = &yd[base + n * d..base + (n + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += a * *s;
                        }
                    }
                }
            }
            (Tensor::from_parts(vec![batch, t, d], out), batch, t, d)
        };
        Ok(self.binary(
            packed,
            out,
            Op::CausalMix {
                packed: packed.id,
                y: self.id,
                batch,
                t,
                d,
            },
        ))
    }

    /// Stack `t` tensors of shape `[b, d]` into `[b, t, d]`.
    pub fn stack(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?
            .tape;
        let (out, rows, d) = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
            let s0 = vals[0].shape().to_vec();
            if s0.len() != 2 {
                return Err(Error::Shape(format!("stack expects [b, d] parts, got {s0:?}")));
            }
            for v in &vals[1..] {
                if v.shape() != s0.as_slice() {
                    return Err(shape_err("stack", &s0, v.shape()));
                }
            }
            let (rows, d) = (s0[0], s0[1]);
            let t = parts.len();
            let mut out = Vec::with_capacity(rows * t * d);
            for r in 0..rows {
                for v in &vals {
                    out.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
                }
            }
            (Tensor::from_parts(vec![rows, t, d], out), rows, d)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(
            out,
            Op::Stack {
                parts: ids,
                rows,
                d,
            },
            rg,
        ))
    }

    /// Token `index` of a `[b, t, d]` tensor, as `[b, d]`.
    pub fn select(&self, index: usize) -> Result<Var<'t, S>> {
        let (out, rows, t, d) = {
            let x = self.tape.value(self.id);
            if x.shape().len() != 3 || index >= x.shape()[1] {
                return Err(Error::Shape(format!(
                    "select token {} from {:?}",
                    index,
                    x.shape()
                )));
            }
            let (rows, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = Vec::with_capacity(rows * d);
            for r in 0..rows {
                out.extend_from_slice(&x.data()[(r * t + index) * d..(r * t + index + 1) * d]);
            }
            (Tensor::from_parts(vec![rows, d], out), rows, t, d)
        };
        Ok(self.unary(
            out,
            Op::Select {
                x: self.id,
                rows,
                t,
                d,
                index,
            },
        ))
    }

    /// `[b, p] ++ [b, q] → [b, p+q]`.
    pub fn concat(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let (out, rows, p, q) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
                return Err(shape_err("concat", a.shape(), b.shape()));
            }
            let (rows, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Vec::with_capacity(rows * (p + q));
            for r in 0..rows {
                out.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
                out.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
            }
            (Tensor::from_parts(vec![rows, p + q], out), rows, p, q)
        };
        Ok(self.binary(
            other,
            out,
            Op::Concat {
                a: self.id,
                b: other.id,
                rows,
                p,
                q,
            },
        ))
    }

    /// Repeat a `[d]` vector into `[rows, d]`.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Var<'t, S>> {
        let out = {
            let v = self.tape.value(self.id);
            if v.shape().len() != 1 {
                return Err(Error::Shape(format!(
                    "broadcast_rows expects a vector, got {:?}",
                    v.shape()
                )));
            }
            let d = v.len();
            let mut out = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                out.extend_from_slice(v.data());
            }
            Tensor::from_parts(vec![rows, d], out)
        };
        Ok(self.unary(out, Op::BroadcastRows { v: self.id, rows }))
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn cat0(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::Shape("cat0 of zero tensors".into()))?
            .tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
            let s0 = vals[0].shape();
            if s0.is_empty() {
                return Err(Error::Shape("cat0 of scalars".into()));
            }
            let mut lead = 0;
            for v in &vals {
                if v.shape().len() != s0.len() || v.shape()[1..] != s0[1..] {
                    return Err(shape_err("cat0", s0, v.shape()));
                }
                lead += v.shape()[0];
            }
            let mut shape = s0.to_vec();
            shape[0] = lead;
            let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(out, Op::Cat0 { parts: ids }, rg))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice0(&self, start: usize, len: usize) -> Result<Var<'t, S>> {
        let (out, offset) = {
            let x = self.tape.value(self.id);
            let s = x.shape();
            if s.is_empty() || start + len > s[0] {
                return Err(Error::Shape(format!(
                    "slice0 {start}..{} of {s:?}",
                    start + len
                )));
            }
            let w = x.len() / s[0].max(1);
            let mut shape = s.to_vec();
            shape[0] = len;
            (
                Tensor::from_parts(shape, x.data()[start * w..(start + len) * w].to_vec()),
                start * w,
            )
        };
        Ok(self.unary(
            out,
            Op::Slice0 {
                x: self.id,
                start: offset,
            },
        ))
    }

    /// Diagonal-Gaussian log density of `value` under (`self` = mean `[b, d]`,
    /// `log_std` `[d]`), summed over `d`; returns `[b]`. `log_std` is clamped
    /// to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn gaussian_log_prob(&self, log_std: &Var<'t, S>, value: &Var<'t, S>) -> Result<Var<'t, S>> {
        let (out, rows, d) = {
            let m = self.tape.value(self.id);
            let l = self.tape.value(log_std.id);
            let v = self.tape.value(value.id);
            if m.shape().len() != 2 || v.shape() != m.shape() || l.shape() != [m.shape()[1]] {
                return Err(Error::Shape(format!(
                    "gaussian_log_prob: mean {:?}, log_std {:?}, value {:?}",
                    m.shape(),
                    l.shape(),
                    v.shape()
                )));
            }
            let (rows, d) = (m.shape()[0], m.shape()[1]);
            let half = S::of(0.5);
            let half_log_2pi = S::of(0.5 * (2.0 * PI).ln());
            let (lo, hi) = (S::of(LOG_STD_MIN), S::of(LOG_STD_MAX));
            let ls: Vec<S> = l.data().iter().map(|&x| x.max(lo).min(hi)).collect();
            let mut out = vec![S::zero(); rows];
            for r in 0..rows {
                let mut acc = S::zero();
                for j in 0..d {
                    let z = (v.data()[r * d + j] - m.data()[r * d + j]) * (-ls[j]).exp();
                    acc += -half * z * z - ls[j] - half_log_2pi;
                }
                out[r] = acc;
            }
            (Tensor::from_parts(vec![rows], out), rows, d)
        };
        let rg = self.tape.rg(&[self.id, log_std.id, value.id]);
        Ok(self.tape.push(
            out,
            Op::GaussianLogProb {
                mean: self.id,
                log_std: log_std.id,
                value: value.id,
                rows,
                d,
            },
            rg,
        ))
    }

    /// Elementwise `|τ − 1(x<0)|·x²`.
    pub fn expectile(&self, tau: f64) -> Result<Var<'t, S>> {
        check_tau(tau)?;
        let t = S::of(tau);
        let v = self
            .tape
            .value(self.id)
            .map(|x| if x < S::zero() { (S::one() - t) * x * x } else { t * x * x });
        Ok(self.unary(v, Op::Expectile { x: self.id, tau: t }))
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(0.5..1.0).contains(&tau) {
        return Err(Error::Config(format!("expectile tau {tau} outside [0.5, 1)")));
    }
    Ok(())
}

impl<'t, S: Scalar> std::ops::Add for Var<'t, S> {
    type Output = Var<'t, S>;
    fn add(self, rhs: Self) -> Self {
        Var::add(&self, &rhs).expect("shape mismatch in +")
    }
}

impl<'t, S: Scalar> std::ops::Sub for Var<'t, S> {
    type Output = Var<'t, S>;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(&self, &rhs).expect("shape mismatch in -")
    }
}
