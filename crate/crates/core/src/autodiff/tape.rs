//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is one reverse sweep.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Records one forward pass. Consumed by [`Tape::backward`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    AddConst { a: usize },
    Scale { a: usize, s: f64 },
    Swish { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Glu { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum { a: usize },
    SliceRows { a: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    GatherRows { table: usize, idx: Vec<usize> },
    RelBias { table: usize, head: usize, max_dist: usize },
    Unfold { a: usize, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv { x: usize, w: usize },
    Pick { a: usize, idx: Vec<usize> },
    Custom { a: usize, local: Vec<f64> },
    Dropout { a: usize, mask: Vec<f64> },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward sweep, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::param`]; `None` if the loss
    /// does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros when the loss does not reach it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; no gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient in [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if self.consumed.get() {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Single-use reverse sweep seeded with 1.0 at `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        let out = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.needs_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    /// Scalar node whose gradient w.r.t. `a` is `local` times upstream.
    /// Used for losses with a closed-form gradient computed in the forward
    /// pass (CTC).
    pub fn custom_scalar<'t>(&'t self, a: Var<'t>, value: f64, local: Vec<f64>) -> Result<Var<'t>> {
        if local.len() != a.numel() {
            return Err(Error::Dimension(format!(
                "local gradient has {} values for input of {}",
                local.len(),
                a.numel()
            )));
        }
        self.push(Tensor::scalar(value), Op::Custom { a: a.id, local }, &[a.id])
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c (m×n) = a · b + beta · c` with explicit element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every stride/extent pair addresses inside the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, trans_b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = (av.rows(), av.cols());
            let n = out.cols();
            if trans_b {
                if let Some(da) = acc(grads, nodes, a) {
                    gemm(m, n, k, g, (n as isize, 1), bv.data(), (k as isize, 1), da, 1.0);
                }
                if let Some(db) = acc(grads, nodes, b) {
                    gemm(n, m, k, g, (1, n as isize), av.data(), (k as isize, 1), db, 1.0);
                }
            } else {
                if let Some(da) = acc(grads, nodes, a) {
                    gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), da, 1.0);
                }
                if let Some(db) = acc(grads, nodes, b) {
                    gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), db, 1.0);
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = acc(grads, nodes, a) {
                axpy(da, g, 1.0);
            }
            if let Some(db) = acc(grads, nodes, b) {
                axpy(db, g, 1.0);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(da) = acc(grads, nodes, a) {
                axpy(da, g, 1.0);
            }
            if let Some(db) = acc(grads, nodes, b) {
                axpy(db, g, -1.0);
            }
        }
        &Op::Mul { a, b } => {
            let bv = nodes[b].value.data();
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            let av = nodes[a].value.data();
            if let Some(db) = acc(grads, nodes, b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        &Op::AddRow { a, row } => {
            if let Some(da) = acc(grads, nodes, a) {
                axpy(da, g, 1.0);
            }
            let c = nodes[row].value.numel();
            if let Some(dr) = acc(grads, nodes, row) {
                for chunk in g.chunks(c) {
                    axpy(dr, chunk, 1.0);
                }
            }
        }
        &Op::AddConst { a } => {
            if let Some(da) = acc(grads, nodes, a) {
                axpy(da, g, 1.0);
            }
        }
        &Op::Scale { a, s } => {
            if let Some(da) = acc(grads, nodes, a) {
                axpy(da, g, s);
            }
        }
        &Op::Swish { a } => {
            let x = nodes[a].value.data();
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    let s = sigmoid(*xi);
                    *d += gi * s * (1.0 + xi * (1.0 - s));
                }
            }
        }
        &Op::Relu { a } => {
            let x = nodes[a].value.data();
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        &Op::Sigmoid { a } => {
            let y = out.data();
            if let Some(da) = acc(grads, nodes, a) {
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
        }
        &Op::Glu { a } => {
            let x = &nodes[a].value;
            let c = out.cols();
            let rows = out.numel() / c.max(1);
            if let Some(da) = acc(grads, nodes, a) {
                for r in 0..rows {
                    let xr = &x.data()[r * 2 * c..(r + 1) * 2 * c];
                    let dr = &mut da[r * 2 * c..(r + 1) * 2 * c];
                    for j in 0..c {
                        let gv = g[r * c + j];
                        let s = sigmoid(xr[c + j]);
                        dr[j] += gv * s;
                        dr[c + j] += gv * xr[j] * s * (1.0 - s);
                    }
                }
            }
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = out.data();
            if let Some(da) = acc(grads, nodes, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            da[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax { a } => {
            let y = out.data();
            let c = out.cols();
            if let Some(da) = acc(grads, nodes, a) {
                for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = out.cols();
            let gv = nodes[gamma].value.data().to_vec();
            if let Some(dg) = acc(grads, nodes, gamma) {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, beta) {
                for gr in g.chunks(d) {
                    axpy(db, gr, 1.0);
                }
            }
            if let Some(dx) = acc(grads, nodes, x) {
                let mut dxhat = vec![0.0; d];
                for (r, ((dr, gr), xr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dr[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = acc(grads, nodes, a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::SliceRows { a, start } => {
            let c = out.cols();
            if let Some(da) = acc(grads, nodes, a) {
                axpy(&mut da[start * c..start * c + g.len()], g, 1.0);
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(dp) = acc(grads, nodes, p) {
                    axpy(dp, &g[off..off + n], 1.0);
                }
                off += n;
            }
        }
        &Op::SliceCols { a, start } => {
            let w = out.cols();
            let c = nodes[a].value.cols();
            if let Some(da) = acc(grads, nodes, a) {
                for (r, gr) in g.chunks(w).enumerate() {
                    axpy(&mut da[r * c + start..r * c + start + w], gr, 1.0);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let c = out.cols();
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(dp) = acc(grads, nodes, p) {
                    for (r, gr) in g.chunks(c).enumerate() {
                        axpy(&mut dp[r * w..(r + 1) * w], &gr[off..off + w], 1.0);
                    }
                }
                off += w;
            }
        }
        Op::GatherRows { table, idx } => {
            let c = out.cols();
            if let Some(dt) = acc(grads, nodes, *table) {
                for (gr, &i) in g.chunks(c).zip(idx) {
                    axpy(&mut dt[i * c..(i + 1) * c], gr, 1.0);
                }
            }
        }
        &Op::RelBias { table, head, max_dist } => {
            let t = out.rows();
            let width = 2 * max_dist + 1;
            if let Some(dt) = acc(grads, nodes, table) {
                for i in 0..t {
                    for j in 0..t {
                        dt[head * width + rel_index(i, j, max_dist)] += g[i * t + j];
                    }
                }
            }
        }
        &Op::Unfold { a, kernel, stride, pad } => {
            let c = nodes[a].value.cols();
            let t = nodes[a].value.rows();
            let l = out.rows();
            if let Some(da) = acc(grads, nodes, a) {
                for o in 0..l {
                    for j in 0..kernel {
                        let src = (o * stride + j) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        let gofs = o * kernel * c + j * c;
                        axpy(&mut da[src * c..(src + 1) * c], &g[gofs..gofs + c], 1.0);
                    }
                }
            }
        }
        &Op::DepthwiseConv { x, w } => {
            let xv = nodes[x].value.data();
            let wv = nodes[w].value.data();
            let t = nodes[x].value.rows();
            let c = nodes[x].value.cols();
            let k = nodes[w].value.rows();
            let pad = (k - 1) / 2;
            if let Some(dx) = acc(grads, nodes, x) {
                for o in 0..t {
                    for j in 0..k {
                        let src = (o + j) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            dx[src * c + ch] += g[o * c + ch] * wv[j * c + ch];
                        }
                    }
                }
            }
            if let Some(dw) = acc(grads, nodes, w) {
                for o in 0..t {
                    for j in 0..k {
                        let src = (o + j) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            dw[j * c + ch] += g[o * c + ch] * xv[src * c + ch];
                        }
                    }
                }
            }
        }
        Op::Pick { a, idx } => {
            if let Some(da) = acc(grads, nodes, *a) {
                for (gi, &i) in g.iter().zip(idx) {
                    da[i] += gi;
                }
            }
        }
        Op::Custom { a, local } => {
            if let Some(da) = acc(grads, nodes, *a) {
                axpy(da, local, g[0]);
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, gi), m) in da.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
    }
}

/// Column of the relative-position table used for query `i`, key `j`.
#[inline]
pub fn rel_index(i: usize, j: usize, max_dist: usize) -> usize {
    let rel = (j as isize - i as isize).clamp(-(max_dist as isize), max_dist as isize);
    (rel + max_dist as isize) as usize
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn require_matrix(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!("{op}: expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.value(self.id).numel()
    }

    pub fn rows(&self) -> usize {
        self.tape.value(self.id).rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.value(self.id).cols()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'t>> {
        let (value, op) = f(&self.tape.value(self.id))?;
        self.tape.push(value, op, &[self.id])
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        self.unary(|a| {
            let data = a.data().iter().map(|&v| f(v)).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, op))
        })
    }

    fn check_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn zip_with(&self, other: &Var<'t>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            same_shape(name, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, op, &[self.id, other.id])
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// Matrix product with the right operand transposed, `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (m, k) = require_matrix("matmul", &a)?;
            let (br, bc) = require_matrix("matmul", &b)?;
            let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(Error::Dimension(format!(
                    "matmul: {:?} × {:?}{} inner extents differ",
                    a.shape(),
                    b.shape(),
                    if trans_b { "ᵀ" } else { "" }
                )));
            }
            let mut c = vec![0.0; m * n];
            let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), bs, &mut c, 0.0);
            Tensor::new(vec![m, n], c)?
        };
        self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", Op::Add { a: self.id, b: other.id }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", Op::Sub { a: self.id, b: other.id }, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", Op::Mul { a: self.id, b: other.id }, |x, y| x * y)
    }

    /// Adds a length-`C` vector to every row of an `R×C` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(row)?;
        let value = {
            let a = self.tape.value(self.id);
            let r = self.tape.value(row.id);
            let c = a.cols();
            if r.numel() != c {
                return Err(Error::Dimension(format!(
                    "add_row: row {:?} does not match {:?}",
                    r.shape(),
                    a.shape()
                )));
            }
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(c) {
                for (d, v) in chunk.iter_mut().zip(r.data()) {
                    *d += v;
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, Op::AddRow { a: self.id, row: row.id }, &[self.id, row.id])
    }

    /// Adds a constant (no gradient flows into it). Entries may be `-inf`
    /// for attention masking.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        self.unary(|a| {
            same_shape("add_const", a, c)?;
            let data = a.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, Op::AddConst { a: self.id }))
        })
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.map(Op::Scale { a: self.id, s }, |v| v * s)
    }

    pub fn swish(&self) -> Result<Var<'t>> {
        self.map(Op::Swish { a: self.id }, |v| v * sigmoid(v))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map(Op::Relu { a: self.id }, |v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.map(Op::Sigmoid { a: self.id }, sigmoid)
    }

    /// Gated linear unit over the last axis: first half ⊙ σ(second half).
    pub fn glu(&self) -> Result<Var<'t>> {
        self.unary(|a| {
            let c2 = a.cols();
            if c2 % 2 != 0 {
                return Err(Error::Dimension(format!("glu: odd last extent in {:?}", a.shape())));
            }
            let c = c2 / 2;
            let mut data = Vec::with_capacity(a.numel() / 2);
            for row in a.data().chunks(c2) {
                for j in 0..c {
                    data.push(row[j] * sigmoid(row[c + j]));
                }
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = c;
            Ok((Tensor::new(shape, data)?, Op::Glu { a: self.id }))
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.unary(|a| {
            if axis >= a.rank() {
                return Err(Error::Dimension(format!(
                    "softmax: axis {axis} invalid for shape {:?}",
                    a.shape()
                )));
            }
            let outer: usize = a.shape()[..axis].iter().product();
            let len = a.shape()[axis];
            let inner: usize = a.shape()[axis + 1..].iter().product();
            let x = a.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (x[at(l)] - max).exp();
                        y[at(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        y[at(l)] /= z;
                    }
                }
            }
            Ok((
                Tensor::new(a.shape().to_vec(), y)?,
                Op::Softmax {
                    a: self.id,
                    outer,
                    len,
                    inner,
                },
            ))
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        self.unary(|a| {
            let c = a.cols();
            if c == 0 {
                return Err(Error::Dimension("log_softmax over empty axis".into()));
            }
            let mut y = a.data().to_vec();
            for row in y.chunks_mut(c) {
                let lse = super::tensor::log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Ok((Tensor::new(a.shape().to_vec(), y)?, Op::LogSoftmax { a: self.id }))
        })
    }

    /// Normalizes each row over the last axis, then scales and shifts.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.check_tape(gamma)?;
        self.check_tape(beta)?;
        let (value, xhat, rstd) = {
            let x = self.tape.value(self.id);
            let gv = self.tape.value(gamma.id);
            let bv = self.tape.value(beta.id);
            let d = x.cols();
            if d == 0 || x.rank() == 0 {
                return Err(Error::Dimension("layer_norm over an empty axis".into()));
            }
            if gv.numel() != d || bv.numel() != d {
                return Err(Error::Dimension(format!(
                    "layer_norm: gamma {:?} / beta {:?} do not match last extent {d}",
                    gv.shape(),
                    bv.shape()
                )));
            }
            let rows = x.numel() / d;
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            let mut y = vec![0.0; x.numel()];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (xr[j] - mean) * s;
                    xhat[r * d + j] = h;
                    y[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), y)?, xhat, rstd)
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(|a| Ok((Tensor::scalar(a.data().iter().sum()), Op::Sum { a: self.id })))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(|a| {
            if a.rank() == 0 || start + len > a.rows() {
                return Err(Error::Dimension(format!(
                    "slice_rows [{start}, {}) out of range for {:?}",
                    start + len,
                    a.shape()
                )));
            }
            Ok((a.slice_rows(start, len), Op::SliceRows { a: self.id, start }))
        })
    }

    /// Concatenates matrices along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let value = {
            let c = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                first.check_tape(p)?;
                let v = tape.value(p.id);
                if v.cols() != c || v.rank() != 2 {
                    return Err(Error::Dimension(format!(
                        "concat_rows: {:?} does not have {c} columns",
                        v.shape()
                    )));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, c], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(value, Op::ConcatRows { parts: ids.clone() }, &ids)
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        self.unary(|a| {
            let (r, c) = require_matrix("slice_cols", a)?;
            if start + width > c {
                return Err(Error::Dimension(format!(
                    "slice_cols [{start}, {}) out of range for {:?}",
                    start + width,
                    a.shape()
                )));
            }
            let mut data = Vec::with_capacity(r * width);
            for row in a.data().chunks(c) {
                data.extend_from_slice(&row[start..start + width]);
            }
            Ok((Tensor::new(vec![r, width], data)?, Op::SliceCols { a: self.id, start }))
        })
    }

    /// Concatenates matrices along the last axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let value = {
            let r = first.rows();
            let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
            for (p, v) in parts.iter().zip(&vals) {
                first.check_tape(p)?;
                if v.rows() != r || v.rank() != 2 {
                    return Err(Error::Dimension(format!(
                        "concat_cols: {:?} does not have {r} rows",
                        v.shape()
                    )));
                }
            }
            let c: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for v in &vals {
                    data.extend_from_slice(v.row(i));
                }
            }
            Tensor::new(vec![r, c], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(value, Op::ConcatCols { parts: ids.clone() }, &ids)
    }

    /// Row lookup (`self` is the table).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        self.unary(|a| {
            let (r, c) = require_matrix("gather_rows", a)?;
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(Error::Dimension(format!("gather_rows: index {i} ≥ {r}")));
                }
                data.extend_from_slice(a.row(i));
            }
            Ok((
                Tensor::new(vec![idx.len(), c], data)?,
                Op::GatherRows {
                    table: self.id,
                    idx: idx.to_vec(),
                },
            ))
        })
    }

    /// `T×T` bias matrix for one head of a `heads × (2·max_dist+1)` table.
    pub fn rel_bias(&self, head: usize, t: usize, max_dist: usize) -> Result<Var<'t>> {
        self.unary(|a| {
            let (h, w) = require_matrix("rel_bias", a)?;
            if head >= h || w != 2 * max_dist + 1 {
                return Err(Error::Dimension(format!(
                    "rel_bias: table {:?} has no head {head} at max_dist {max_dist}",
                    a.shape()
                )));
            }
            let row = a.row(head);
            let mut data = Vec::with_capacity(t * t);
            for i in 0..t {
                for j in 0..t {
                    data.push(row[rel_index(i, j, max_dist)]);
                }
            }
            Ok((
                Tensor::new(vec![t, t], data)?,
                Op::RelBias {
                    table: self.id,
                    head,
                    max_dist,
                },
            ))
        })
    }

    /// Sliding windows over rows: `[T×C] → [L×kernel·C]`, zero padded by
    /// `pad` frames on both ends, `L = (T + 2·pad − kernel) / stride + 1`.
    pub fn unfold(&self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.unary(|a| {
            let (t, c) = require_matrix("unfold", a)?;
            if stride == 0 || kernel == 0 || t + 2 * pad < kernel {
                return Err(Error::InputTooShort {
                    frames: t,
                    required: kernel.saturating_sub(2 * pad),
                });
            }
            let l = (t + 2 * pad - kernel) / stride + 1;
            let mut data = vec![0.0; l * kernel * c];
            for o in 0..l {
                for j in 0..kernel {
                    let src = (o * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let dst = o * kernel * c + j * c;
                    data[dst..dst + c].copy_from_slice(a.row(src as usize));
                }
            }
            Ok((
                Tensor::new(vec![l, kernel * c], data)?,
                Op::Unfold {
                    a: self.id,
                    kernel,
                    stride,
                    pad,
                },
            ))
        })
    }

    /// Per-channel convolution along time with an odd kernel `[k×C]` and
    /// symmetric zero padding; output length equals input length.
    pub fn depthwise_conv(&self, w: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(w)?;
        let value = {
            let x = self.tape.value(self.id);
            let wv = self.tape.value(w.id);
            let (t, c) = require_matrix("depthwise_conv", &x)?;
            let (k, wc) = require_matrix("depthwise_conv", &wv)?;
            if wc != c || k % 2 == 0 {
                return Err(Error::Dimension(format!(
                    "depthwise_conv: kernel {:?} incompatible with input {:?}",
                    wv.shape(),
                    x.shape()
                )));
            }
            let pad = (k - 1) / 2;
            let mut y = vec![0.0; t * c];
            for o in 0..t {
                for j in 0..k {
                    let src = (o + j) as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let xr = x.row(src as usize);
                    let wr = wv.row(j);
                    let yr = &mut y[o * c..(o + 1) * c];
                    for ch in 0..c {
                        yr[ch] += xr[ch] * wr[ch];
                    }
                }
            }
            Tensor::new(vec![t, c], y)?
        };
        self.tape
            .push(value, Op::DepthwiseConv { x: self.id, w: w.id }, &[self.id, w.id])
    }

    /// Vector of elements at flat indices.
    pub fn pick(&self, idx: &[usize]) -> Result<Var<'t>> {
        self.unary(|a| {
            let n = a.numel();
            let mut data = Vec::with_capacity(idx.len());
            for &i in idx {
                if i >= n {
                    return Err(Error::Dimension(format!("pick: index {i} ≥ {n}")));
                }
                data.push(a.data()[i]);
            }
            Ok((
                Tensor::vector(data),
                Op::Pick {
                    a: self.id,
                    idx: idx.to_vec(),
                },
            ))
        })
    }

    /// Inverted dropout with keep-probability `1 − p`.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Result<Var<'t>> {
        if p <= 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.unary(|a| {
            let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, Op::Dropout { a: self.id, mask }))
        })
    }
}
