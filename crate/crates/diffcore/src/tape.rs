//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value and the
//! information needed to propagate gradients. [`Tape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products. Nodes built
//! only from constants are marked as not requiring gradients and are skipped.

use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for every input, given the upstream
    /// gradient `grad` of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Floor,
    Sign,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Tanh => tanh(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Floor => x.floor(),
            Unary::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Floor | Unary::Sign => 0.0,
        }
    }
}

/// `tanh` through a single `exp`, which is markedly cheaper than libm's
/// `tanh`. Relative error stays below 1e-13; tiny inputs use libm.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 1e-3 {
        return x.tanh();
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Transpose(Var),
    Concat(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Unary(Var, Unary),
    Sum(Var),
    Trace(Var),
    BlockMatMul {
        adj: Var,
        x: Var,
        mask: Option<Arc<[bool]>>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation. A tape is built per
/// forward pass and dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = av.expect_matrix("add_row")?;
        let (r1, n2) = rv.expect_matrix("add_row")?;
        if r1 != 1 || n2 != n {
            return Err(mismatch("add_row", av, rv));
        }
        let mut data = av.data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `a (m×n) ⊙ col (m×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (m, n) = av.expect_matrix("mul_col")?;
        let (m2, c1) = cv.expect_matrix("mul_col")?;
        if m2 != m || c1 != 1 {
            return Err(mismatch("mul_col", av, cv));
        }
        let mut data = av.data().to_vec();
        for i in 0..m {
            let s = cv.data()[i];
            for x in &mut data[i * n..(i + 1) * n] {
                *x *= s;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Concatenate matrices along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::InvalidArgument("concat_cols: no inputs".into()))?;
        let (m, _) = self.value(*first).expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            let (r, c) = v.expect_matrix("concat_cols")?;
            if r != m {
                return Err(mismatch("concat_cols", self.value(*first), v));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for i in 0..m {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::matrix(m, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.expect_matrix("gather_cols")?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(DiffError::InvalidArgument(format!(
                "gather_cols: column {bad} out of range for shape {:?}",
                av.shape()
            )));
        }
        let k = cols.len();
        let mut data = vec![0.0; m * k];
        for i in 0..m {
            for (j, &c) in cols.iter().enumerate() {
                data[i * k + j] = av.data()[i * n + c];
            }
        }
        let value = Tensor::matrix(m, k, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherCols(a, cols.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.expect_matrix("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(DiffError::InvalidArgument(format!(
                "gather_rows: row {bad} out of range for shape {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&av.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::matrix(rows.len(), n, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), rg))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        let rg = self.rg(&[a]) && !matches!(kind, Unary::Floor | Unary::Sign);
        self.push(value, Op::Unary(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn floor(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Floor)
    }

    pub fn sign(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sign)
    }

    /// Sum of all entries, as a 0-D scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).trace()?);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Trace(a), rg))
    }

    /// Applies an `n×n` operator to each consecutive `n`-row block of `x`.
    ///
    /// With a row mask (one flag per row of `x`), the operator used for a
    /// block has the rows and columns of absent nodes zeroed, so absent rows
    /// of the output are exactly zero and present rows only see present
    /// inputs.
    pub fn block_matmul(&mut self, adj: Var, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (av, xv) = (self.value(adj), self.value(x));
        let n = av.expect_square("block_matmul")?;
        let (rows, d) = xv.expect_matrix("block_matmul")?;
        if n == 0 || rows % n != 0 {
            return Err(mismatch("block_matmul", av, xv));
        }
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(DiffError::InvalidArgument(format!(
                    "block_matmul: mask length {} does not match {rows} rows",
                    m.len()
                )));
            }
        }
        let mut out = vec![0.0; rows * d];
        block_forward(av.data(), xv.data(), mask, &mut out, n, d);
        let value = Tensor::matrix(rows, d, out)?;
        let rg = self.rg(&[adj, x]);
        Ok(self.push(
            value,
            Op::BlockMatMul {
                adj,
                x,
                mask: mask.map(Arc::from),
            },
            rg,
        ))
    }

    /// Records a custom operation whose forward value was computed by the
    /// caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.shape().iter().any(|&s| s != 1) {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.requires_grad(*row) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut acc = vec![0.0; n];
                    for i in 0..m {
                        for (s, x) in acc.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::matrix(1, n, acc)?)?;
                }
            }
            Op::MulCol(a, col) => {
                let (m, n) = (g.rows(), g.cols());
                let cv = self.value(*col);
                if self.requires_grad(*a) {
                    let mut data = g.data().to_vec();
                    for i in 0..m {
                        let s = cv.data()[i];
                        for x in &mut data[i * n..(i + 1) * n] {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::matrix(m, n, data)?)?;
                }
                if self.requires_grad(*col) {
                    let av = self.value(*a);
                    let data = (0..m)
                        .map(|i| {
                            g.data()[i * n..(i + 1) * n]
                                .iter()
                                .zip(&av.data()[i * n..(i + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, Tensor::matrix(m, 1, data)?)?;
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Concat(parts) => {
                let (m, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::matrix(m, w, data)?)?;
                    }
                    offset += w;
                }
            }
            Op::GatherCols(a, cols) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let k = cols.len();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for (j, &c) in cols.iter().enumerate() {
                        data[i * n + c] += g.data()[i * k + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, data)?)?;
            }
            Op::GatherRows(a, rows) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut data = vec![0.0; m * n];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, s) in data[r * n..(r + 1) * n].iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, data)?)?;
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()))?;
            }
            Op::Trace(a) => {
                let n = self.value(*a).rows();
                self.accumulate(grads, *a, Tensor::eye(n).scale(g.item()))?;
            }
            Op::BlockMatMul { adj, x, mask } => {
                let (av, xv) = (self.value(*adj), self.value(*x));
                let n = av.rows();
                let d = xv.cols();
                let mask = mask.as_deref();
                if self.requires_grad(*x) {
                    let at = av.transpose()?;
                    let mut out = vec![0.0; xv.len()];
                    block_forward(at.data(), g.data(), mask, &mut out, n, d);
                    self.accumulate(grads, *x, Tensor::matrix(xv.rows(), d, out)?)?;
                }
                if self.requires_grad(*adj) {
                    let mut ga = vec![0.0; n * n];
                    let blocks = xv.rows() / n;
                    let present = |r: usize| mask.is_none_or(|m| m[r]);
                    for b in 0..blocks {
                        for i in 0..n {
                            let ri = b * n + i;
                            if !present(ri) {
                                continue;
                            }
                            let gi = &g.data()[ri * d..(ri + 1) * d];
                            for k in 0..n {
                                let rk = b * n + k;
                                if !present(rk) {
                                    continue;
                                }
                                let xk = &xv.data()[rk * d..(rk + 1) * d];
                                ga[i * n + k] += gi.iter().zip(xk).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    self.accumulate(grads, *adj, Tensor::matrix(n, n, ga)?)?;
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                if outs.len() != inputs.len() {
                    return Err(DiffError::InvalidArgument(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        outs.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(outs) {
                    self.accumulate(grads, *v, gi)?;
                }
            }
        }
        Ok(())
    }
}

/// `out_b = op_b · x_b` for each `n`-row block, with optional row mask.
fn block_forward(op: &[f64], x: &[f64], mask: Option<&[bool]>, out: &mut [f64], n: usize, d: usize) {
    let rows = x.len() / d.max(1);
    let blocks = if n == 0 { 0 } else { rows / n };
    match mask {
        None => {
            for b in 0..blocks {
                let xs = &x[b * n * d..(b + 1) * n * d];
                let os = &mut out[b * n * d..(b + 1) * n * d];
                matmul_into(op, xs, os, n, n, d);
            }
        }
        Some(m) => {
            for b in 0..blocks {
                for i in 0..n {
                    let ri = b * n + i;
                    if !m[ri] {
                        continue;
                    }
                    for k in 0..n {
                        let rk = b * n + k;
                        let a = op[i * n + k];
                        if !m[rk] || a == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            out[ri * d + c] += a * x[rk * d + c];
                        }
                    }
                }
            }
        }
    }
}
