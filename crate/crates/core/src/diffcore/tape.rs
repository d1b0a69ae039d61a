//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so parents always precede children and the
//! reverse sweep in [`Tape::backward`] is a single pass from the loss down to
//! index zero.
//!
//! Stop-gradient values (`detach`, straight-through corrections, discrete
//! selections) go through [`Tape::frozen`]. A tape in *record* mode remembers
//! each such value; a tape in *replay* mode hands the remembered values back
//! in the same order. Finite differences taken under replay therefore see the
//! smooth surrogate whose exact gradient is the one the tape reports.

use super::tensor::Tensor;
use crate::error::{contract_err, param_err, shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    /// `relu(-x)`, the negative half of a concatenated ReLU.
    CReluPre,
    Exp,
    Log,
}

/// Elementwise binary primitives (exact shape match or scalar broadcast).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(Unary, usize),
    GroupedSoftmax { x: usize, group_dim: usize, tau: f64 },
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Concat(Vec<usize>),
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
    Pick { x: usize, idx: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
enum Freeze {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay {
        values: Vec<Tensor>,
        cursor: usize,
    },
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    freeze: Freeze,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    /// Gradient for `v`, or `None` if `v` does not influence the loss or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that remembers every frozen value it produces.
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            freeze: Freeze::Record(Vec::new()),
        }
    }

    /// Tape that returns previously recorded frozen values in order.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Self {
            nodes: Vec::new(),
            freeze: Freeze::Replay { values, cursor: 0 },
        }
    }

    /// Frozen values captured so far by a recording tape.
    pub fn take_frozen(&mut self) -> Vec<Tensor> {
        match std::mem::take(&mut self.freeze) {
            Freeze::Record(v) => v,
            Freeze::Replay { values, .. } => values,
            Freeze::Off => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err!("expected a matrix operand, got shape {s:?}")),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.needs_grad(),
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        let mut value = value;
        value.set_requires_grad(false);
        value.clear_grad();
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`; it collects gradients iff
    /// `t.needs_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut v = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        v.set_requires_grad(t.needs_grad());
        self.push(v, Op::Leaf, &[])
    }

    /// Records a leaf that never collects gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, &[])
    }

    /// Passes `t` through the record/replay mechanism.
    pub fn frozen(&mut self, t: Tensor) -> Result<Tensor> {
        match &mut self.freeze {
            Freeze::Off => Ok(t),
            Freeze::Record(log) => {
                log.push(t.clone());
                Ok(t)
            }
            Freeze::Replay { values, cursor } => {
                let out = values
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| contract_err!("replay exhausted at frozen value {cursor}"))?;
                if out.shape() != t.shape() {
                    return Err(shape_err!(
                        "replayed value has shape {:?}, expected {:?}",
                        out.shape(),
                        t.shape()
                    ));
                }
                *cursor += 1;
                Ok(out)
            }
        }
    }

    /// Stop-gradient: same value, no gradient flows to `x`.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.frozen(self.value(x).clone())?;
        Ok(self.constant(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(shape_err!("matmul [{m}x{k}] by [{k2}x{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a length-`n` row vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(row).numel() != n {
            return Err(shape_err!(
                "row of {} values added to width {n}",
                self.value(row).numel()
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::AddRow(x.0, row.0), &[x.0, row.0]))
    }

    /// `x · w + b` with `w: [in × out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.numel() == 1 {
            va.shape().to_vec()
        } else if va.numel() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(shape_err!(
                "{op:?} of {:?} and {:?} (only exact or scalar broadcast)",
                va.shape(),
                vb.shape()
            ));
        };
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out: Vec<f64> = (0..n).map(|i| f(at(va, i), at(vb, i))).collect();
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Binary(op, a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.binary(Binary::Mul, x, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| a * c).collect())?;
        Ok(self.push(t, Op::Scale(x.0, c), &[x.0]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| a + c).collect())?;
        Ok(self.push(t, Op::Offset(x.0), &[x.0]))
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data: Vec<f64> = match op {
            Unary::Relu => v.data().iter().map(|&a| a.max(0.0)).collect(),
            Unary::CReluPre => v.data().iter().map(|&a| (-a).max(0.0)).collect(),
            Unary::Tanh => v.data().iter().map(|a| a.tanh()).collect(),
            Unary::Exp => {
                let out: Vec<f64> = v.data().iter().map(|a| a.exp()).collect();
                if out.iter().any(|a| !a.is_finite()) {
                    return Err(Error::Numeric("exp overflow".into()));
                }
                out
            }
            Unary::Log => {
                if let Some(bad) = v.data().iter().find(|&&a| a <= 0.0 || a.is_nan()) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                v.data().iter().map(|a| a.ln()).collect()
            }
        };
        let t = Tensor::new(v.shape(), data)?;
        Ok(self.push(t, Op::Unary(op, x.0), &[x.0]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    /// Temperature softmax inside each contiguous block of `group_dim`
    /// columns. The row width must equal `groups * group_dim`.
    pub fn grouped_softmax(&mut self, x: Var, groups: usize, group_dim: usize, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(param_err!("softmax temperature must be > 0, got {tau}"));
        }
        if groups == 0 || group_dim == 0 {
            return Err(param_err!("groups and group size must be positive"));
        }
        let (m, n) = self.dims(x)?;
        if n != groups * group_dim {
            return Err(shape_err!(
                "width {n} does not split into {groups} groups of {group_dim}"
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for block in out.chunks_mut(group_dim) {
            softmax_in_place(block, tau);
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::GroupedSoftmax { x: x.0, group_dim, tau }, &[x.0]))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        self.grouped_softmax(x, 1, n, 1.0)
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|a| (a - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|a| *a -= lse);
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::LogSoftmax(x.0), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0]))
    }

    /// Sums each row of an `m × n` matrix into an `m × 1` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let out = self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect();
        let t = Tensor::matrix(m, 1, out)?;
        Ok(self.push(t, Op::RowSum(x.0), &[x.0]))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of zero tensors"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect::<Result<_>>()?;
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(shape_err!("concat of matrices with different row counts"));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::Concat(idx.clone()), &idx))
    }

    /// Clips every entry to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(param_err!("clamp range [{lo}, {hi}] is empty"));
        }
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| a.clamp(lo, hi)).collect())?;
        Ok(self.push(t, Op::Clamp { x: x.0, lo, hi }, &[x.0]))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("minimum of {:?} and {:?}", va.shape(), vb.shape()));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::new(va.shape(), out)?;
        Ok(self.push(t, Op::Minimum(a.0, b.0), &[a.0, b.0]))
    }

    /// Selects column `idx[i]` of row `i`, giving an `m × 1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(shape_err!("pick indices do not fit [{m}x{n}]"));
        }
        let v = self.value(x).data();
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * n + j]).collect();
        let t = Tensor::matrix(m, 1, out)?;
        Ok(self.push(
            t,
            Op::Pick {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Stacks rows `idx` of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if idx.is_empty() || idx.iter().any(|&j| j >= m) {
            return Err(shape_err!("row indices do not fit [{m}x{n}]"));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &j in idx {
            out.extend_from_slice(&v[j * n..(j + 1) * n]);
        }
        let t = Tensor::matrix(idx.len(), n, out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Grads(grads))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |p: usize| self.nodes[p].value.data();
        let wants = |p: usize| self.nodes[p].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a].value.dims2().expect("matrix");
                let n = out.shape()[1];
                if wants(a) {
                    let ga = slot(grads, a, m * k);
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), val(b), (1, n), ga, 1.0);
                }
                if wants(b) {
                    let gb = slot(grads, b, k * n);
                    // dB = Aᵀ · dC
                    gemm(k, m, n, val(a), (1, k), g, (n, 1), gb, 1.0);
                }
            }
            &Op::AddRow(x, r) => {
                if wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if wants(r) {
                    let n = self.nodes[r].value.numel();
                    let gr = slot(grads, r, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Binary(op, a, b) => {
                let (na, nb) = (val(a).len(), val(b).len());
                let at = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                for (p, other, sign) in [(a, b, 1.0), (b, a, -1.0)] {
                    if !wants(p) {
                        continue;
                    }
                    let np = if p == a { na } else { nb };
                    let gp = slot(grads, p, np);
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match op {
                            Binary::Add => gk,
                            Binary::Sub => sign * gk,
                            Binary::Mul => gk * at(val(other), k),
                        };
                        if np == 1 {
                            gp[0] += d;
                        } else {
                            gp[k] += d;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    let gx = slot(grads, x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            &Op::Offset(x) | &Op::Reshape(x) => {
                if wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
            }
            &Op::Unary(op, x) => {
                if !wants(x) {
                    return;
                }
                let xin = val(x);
                let y = out.data();
                let gx = slot(grads, x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k]
                        * match op {
                            Unary::Relu => f64::from(u8::from(xin[k] > 0.0)),
                            Unary::CReluPre => -f64::from(u8::from(xin[k] < 0.0)),
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Exp => y[k],
                            Unary::Log => 1.0 / xin[k],
                        };
                }
            }
            &Op::GroupedSoftmax { x, group_dim, tau } => {
                if !wants(x) {
                    return;
                }
                let gx = slot(grads, x, g.len());
                for ((gb, yb), dst) in g
                    .chunks(group_dim)
                    .zip(out.data().chunks(group_dim))
                    .zip(gx.chunks_mut(group_dim))
                {
                    let dot: f64 = gb.iter().zip(yb).map(|(a, b)| a * b).sum();
                    for k in 0..group_dim {
                        dst[k] += yb[k] * (gb[k] - dot) / tau;
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                if !wants(x) {
                    return;
                }
                let n = out.shape()[1];
                let gx = slot(grads, x, g.len());
                for ((gr, yr), dst) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for k in 0..n {
                        dst[k] += gr[k] - yr[k].exp() * s;
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    let n = val(x).len();
                    slot(grads, x, n).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let n = val(x).len();
                    let d = g[0] / n as f64;
                    slot(grads, x, n).iter_mut().for_each(|a| *a += d);
                }
            }
            &Op::RowSum(x) => {
                if wants(x) {
                    let n = val(x).len();
                    let cols = n / g.len();
                    let gx = slot(grads, x, n);
                    for (r, &gr) in gx.chunks_mut(cols).zip(g) {
                        r.iter_mut().for_each(|a| *a += gr);
                    }
                }
            }
            Op::Concat(parts) => {
                let m = out.shape()[0];
                let n = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if wants(p) {
                        let gp = slot(grads, p, m * c);
                        for r in 0..m {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * n + off..r * n + off + c]);
                        }
                    }
                    off += c;
                }
            }
            &Op::Clamp { x, lo, hi } => {
                if wants(x) {
                    let xin = val(x);
                    let gx = slot(grads, x, g.len());
                    for k in 0..g.len() {
                        if xin[k] >= lo && xin[k] <= hi {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    let ga = slot(grads, a, g.len());
                    for k in 0..g.len() {
                        if va[k] <= vb[k] {
                            ga[k] += g[k];
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, g.len());
                    for k in 0..g.len() {
                        if va[k] > vb[k] {
                            gb[k] += g[k];
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                let x = *x;
                if wants(x) {
                    let n = val(x).len() / idx.len();
                    let gx = slot(grads, x, val(x).len());
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * n + j] += g[i];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                if wants(x) {
                    let n = out.shape()[1];
                    let gx = slot(grads, x, val(x).len());
                    for (i, &j) in idx.iter().enumerate() {
                        add_into(&mut gx[j * n..(j + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], p: usize, n: usize) -> &mut [f64] {
    grads[p].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Max-subtracted temperature softmax of one block.
pub(crate) fn softmax_in_place(block: &mut [f64], tau: f64) {
    let mx = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for a in block.iter_mut() {
        *a = ((*a - mx) / tau).exp();
        s += *a;
    }
    block.iter_mut().for_each(|a| *a /= s);
}

/// `c = a · b + beta · c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable with the given strides,
    // checked by the assertion above for the row-major and transposed layouts
    // used in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::new();
        let i2 = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let v = t.constant(mat(2, 1, &[5.0, 7.0]));
        let c = t.matmul(p, v).unwrap();
        assert_eq!(t.value(c).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        let th = t.tanh(z).unwrap();
        assert_eq!(t.value(th).data(), &[0.0]);
        let e = t.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let ex = t.exp(e).unwrap();
        assert_eq!(t.value(ex).data()[0], 1.0);
        assert!((t.value(ex).data()[1] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap().requires_grad());
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn grouped_softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 4]));
        let y = t.grouped_softmax(z, 1, 4, 1.0).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);

        let z = t.constant(mat(1, 2, &[0.0, 3f64.ln()]));
        let y = t.grouped_softmax(z, 1, 2, 1.0).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn grouped_softmax_errors() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 6]));
        assert!(matches!(t.grouped_softmax(z, 4, 2, 1.0), Err(Error::Shape(_))));
        assert!(matches!(t.grouped_softmax(z, 3, 2, 0.0), Err(Error::Param(_))));
        assert!(matches!(t.grouped_softmax(z, 3, 2, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn grouped_softmax_small_temperature_does_not_overflow() {
        let mut t = Tape::new();
        let z = t.constant(mat(1, 2, &[1000.0, 2000.0]));
        let y = t.grouped_softmax(z, 1, 2, 1e-2).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(&[2]).requires_grad());
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn dot_product_gradient_is_input() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap().requires_grad());
        let x = t.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let p = t.mul(w, x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn squared_residual_gradient_matches_closed_form() {
        // loss = (w·z - y)^2  =>  grad = 2 (w·z - y) z
        let (wv, zv, y) = ([0.3, -0.7], [1.5, 2.0], 0.25);
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::matrix(1, 2, wv.to_vec()).unwrap().requires_grad());
        let z = t.constant(Tensor::matrix(2, 1, zv.to_vec()).unwrap());
        let wz = t.matmul(w, z).unwrap();
        let r = t.add_scalar(wz, -y).unwrap();
        let l = t.square(r).unwrap();
        let l = t.sum(l).unwrap();
        let g = t.backward(l).unwrap();
        let resid = wv[0] * zv[0] + wv[1] * zv[1] - y;
        let want = [2.0 * resid * zv[0], 2.0 * resid * zv[1]];
        for (a, b) in g.get(w).unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn detach_blocks_gradient_and_replays() {
        let mut t = Tape::recording();
        let x = t.leaf(&Tensor::scalar(3.0).requires_grad());
        let d = t.detach(x).unwrap();
        let y = t.mul(x, d).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        let frozen = t.take_frozen();
        assert_eq!(frozen.len(), 1);

        let mut r = Tape::replaying(frozen);
        let x = r.leaf(&Tensor::scalar(5.0).requires_grad());
        let d = r.detach(x).unwrap();
        assert_eq!(r.value(d).item(), 3.0);
    }

    #[test]
    fn pick_gather_concat_shapes() {
        let mut t = Tape::new();
        let x = t.constant(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = t.pick(x, &[2, 0]).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 4.0]);
        let g = t.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.shape(g), &[3, 3]);
        let c = t.concat_cols(&[x, p]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 5.0, 6.0, 4.0]);
    }
}
