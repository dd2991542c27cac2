use std::cell::RefCell;

use super::kernels;
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Watch(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    AddScalar(usize),
    Relu(usize),
    Softmax { x: usize, rows: bool },
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    CausalMask(usize),
    Select { x: usize, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.value.len()),
        }
    }
}

/// Records one forward computation for reverse-mode differentiation.
///
/// A tape is built fresh for each forward pass and dropped afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&self, shape: Vec<usize>, data: Vec<f64>) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
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

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "nothing to concatenate".into(),
        })?;
        let (rows, cols, value) = {
            let nodes = self.nodes.borrow();
            let (rows, _) = nodes[first.id].dims2();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                self.same_tape(p)?;
                let (r, c) = nodes[p.id].dims2();
                if r != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[first.id].shape.clone(),
                        rhs: nodes[p.id].shape.clone(),
                    });
                }
                widths.push(c);
            }
            let cols: usize = widths.iter().sum();
            let mut value = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    value.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
                }
            }
            (rows, cols, value)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![rows, cols], value, Op::ConcatCols(ids), rg))
    }

    /// Stacks matrices with equal column counts along the first axis.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "nothing to concatenate".into(),
        })?;
        let (rows, cols, value) = {
            let nodes = self.nodes.borrow();
            let (_, cols) = nodes[first.id].dims2();
            let mut rows = 0;
            let mut value = Vec::new();
            for p in parts {
                self.same_tape(p)?;
                let (r, c) = nodes[p.id].dims2();
                if c != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: nodes[first.id].shape.clone(),
                        rhs: nodes[p.id].shape.clone(),
                    });
                }
                rows += r;
                value.extend_from_slice(&nodes[p.id].value);
            }
            (rows, cols, value)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![rows, cols], value, Op::ConcatRows(ids), rg))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        self.same_tape(&table)?;
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let (rows, cols) = nodes[table.id].dims2();
            let mut value = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                if i >= rows {
                    return Err(TensorError::Invalid {
                        op: "gather_rows",
                        msg: format!("row {i} out of range for {} rows", rows),
                    });
                }
                value.extend_from_slice(&nodes[table.id].value[i * cols..(i + 1) * cols]);
            }
            (value, cols)
        };
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        let rg = self.rg(&[table.id]);
        Ok(self.push(
            vec![ids.len(), cols],
            value,
            Op::GatherRows {
                table: table.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    fn same_tape(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "tape",
                msg: "operands recorded on different tapes".into(),
            })
        }
    }

    /// Backpropagates from a scalar `loss`.
    ///
    /// Gradients are added into every node that requires one, so leaves and
    /// intermediates can be queried with [`Var::grad`] afterwards. Calling it
    /// again accumulates.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.same_tape(&loss)?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss.id].shape.clone()));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            match &mut nodes[id].grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Watch(a) => add_into(grads, nodes, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (m, k) = nodes[*a].dims2();
            let (_, n) = nodes[*b].dims2();
            if nodes[*a].requires_grad {
                let ga = kernels::matmul_nt(g, &nodes[*b].value, m, n, k);
                add_into(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = kernels::matmul_tn(&nodes[*a].value, g, m, k, n);
                add_into(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = node.dims2();
            add_into(grads, nodes, *a, kernels::transpose(g, r, c));
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, g.to_vec());
            add_into(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, g.to_vec());
            add_into(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.iter().zip(&nodes[*b].value).map(|(x, y)| x * y).collect();
                add_into(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = g.iter().zip(&nodes[*a].value).map(|(x, y)| x * y).collect();
                add_into(grads, nodes, *b, gb);
            }
        }
        Op::AddRow(a, row) => {
            add_into(grads, nodes, *a, g.to_vec());
            if nodes[*row].requires_grad {
                let (r, c) = node.dims2();
                let mut gr = vec![0.0; c];
                for i in 0..r {
                    gr.iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                        .for_each(|(o, v)| *o += v);
                }
                add_into(grads, nodes, *row, gr);
            }
        }
        Op::Scale(a, s) => add_into(grads, nodes, *a, g.iter().map(|v| v * s).collect()),
        Op::ScaleBy(a, s) => {
            let sv = nodes[*s].value[0];
            add_into(grads, nodes, *a, g.iter().map(|v| v * sv).collect());
            if nodes[*s].requires_grad {
                let gs = g.iter().zip(&nodes[*a].value).map(|(x, y)| x * y).sum();
                add_into(grads, nodes, *s, vec![gs]);
            }
        }
        Op::AddScalar(a) => add_into(grads, nodes, *a, g.to_vec()),
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(&nodes[*a].value)
                .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                .collect();
            add_into(grads, nodes, *a, ga);
        }
        Op::Softmax { x, rows } => {
            let (r, c) = node.dims2();
            let y = &node.value;
            let mut gx = vec![0.0; y.len()];
            let (outer, inner, stride_o, stride_i) =
                if *rows { (r, c, c, 1) } else { (c, r, 1, c) };
            for o in 0..outer {
                let mut dot = 0.0;
                for i in 0..inner {
                    let idx = o * stride_o + i * stride_i;
                    dot += g[idx] * y[idx];
                }
                for i in 0..inner {
                    let idx = o * stride_o + i * stride_i;
                    gx[idx] = y[idx] * (g[idx] - dot);
                }
            }
            add_into(grads, nodes, *x, gx);
        }
        Op::LogSoftmaxRows(x) => {
            let (r, c) = node.dims2();
            let y = &node.value;
            let mut gx = vec![0.0; y.len()];
            for i in 0..r {
                let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    let idx = i * c + j;
                    gx[idx] = g[idx] - y[idx].exp() * gs;
                }
            }
            add_into(grads, nodes, *x, gx);
        }
        Op::Sum(a) => add_into(grads, nodes, *a, vec![g[0]; nodes[*a].value.len()]),
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            add_into(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumRows(a) => {
            let (r, c) = nodes[*a].dims2();
            let mut ga = Vec::with_capacity(r * c);
            for _ in 0..r {
                ga.extend_from_slice(&g[..c]);
            }
            add_into(grads, nodes, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let (r, c) = node.dims2();
            let mut offset = 0;
            for &p in parts {
                let (_, w) = nodes[p].dims2();
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * c + offset..i * c + offset + w]);
                    }
                    add_into(grads, nodes, p, gp);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if nodes[p].requires_grad {
                    add_into(grads, nodes, p, g[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::SliceCols { x, start } => {
            let (r, w) = node.dims2();
            let (_, c) = nodes[*x].dims2();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            add_into(grads, nodes, *x, gx);
        }
        Op::GatherRows { table, ids } => {
            let (_, c) = node.dims2();
            let mut gt = vec![0.0; nodes[*table].value.len()];
            for (k, &row) in ids.iter().enumerate() {
                gt[row * c..(row + 1) * c]
                    .iter_mut()
                    .zip(&g[k * c..(k + 1) * c])
                    .for_each(|(o, v)| *o += v);
            }
            add_into(grads, nodes, *table, gt);
        }
        Op::CausalMask(x) => {
            let (r, c) = node.dims2();
            let mut gx = g.to_vec();
            for i in 0..r {
                for j in (i + 1)..c {
                    gx[i * c + j] = 0.0;
                }
            }
            add_into(grads, nodes, *x, gx);
        }
        Op::Select { x, idx } => {
            let mut gx = vec![0.0; nodes[*x].value.len()];
            for (k, &i) in idx.iter().enumerate() {
                gx[i] += g[k];
            }
            add_into(grads, nodes, *x, gx);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    /// Row/column view of the value (rank-1 reads as one row).
    pub fn dims2(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].dims2()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded node is well formed")
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if any reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad matches shape"))
    }

    fn with<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id])
    }

    fn check_same(&self, other: &Var<'t>) -> Result<()> {
        self.tape.same_tape(other)
    }

    fn unary(self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary(self, other: Var<'t>, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'t> {
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(shape, value, op, rg)
    }

    fn mismatch(&self, other: &Var<'t>, op: &'static str) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(),
            rhs: other.shape(),
        }
    }

    /// Identity that forces gradient tracking from here on, so the gradient
    /// reaching this point can be read back after backward.
    pub fn watch(self) -> Var<'t> {
        let (shape, value) = self.with(|n| (n.shape.clone(), n.value.clone()));
        self.tape.push(shape, value, Op::Watch(self.id), true)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (m, k) = nodes[self.id].dims2();
            let (k2, n) = nodes[other.id].dims2();
            if k != k2 {
                drop(nodes);
                return Err(self.mismatch(&other, "matmul"));
            }
            (
                kernels::matmul(&nodes[self.id].value, &nodes[other.id].value, m, k, n),
                m,
                n,
            )
        };
        let (v, m, n) = value;
        Ok(self.binary(other, vec![m, n], v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Var<'t> {
        let (r, c, v) = self.with(|n| {
            let (r, c) = n.dims2();
            (r, c, kernels::transpose(&n.value, r, c))
        });
        self.unary(vec![c, r], v, Op::Transpose(self.id))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_same(&other)?;
        let res = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                None
            } else {
                Some((
                    a.shape.clone(),
                    a.value
                        .iter()
                        .zip(&b.value)
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                ))
            }
        };
        match res {
            Some((shape, v)) => Ok(self.binary(other, shape, v, op)),
            None => Err(self.mismatch(&other, op_name)),
        }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a `[1, c]` row vector to every row of an `[r, c]` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_same(&row)?;
        let res = {
            let nodes = self.tape.nodes.borrow();
            let (r, c) = nodes[self.id].dims2();
            let (rr, rc) = nodes[row.id].dims2();
            if rr != 1 || rc != c {
                None
            } else {
                let rv = &nodes[row.id].value;
                let mut v = nodes[self.id].value.clone();
                for i in 0..r {
                    v[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(rv)
                        .for_each(|(o, b)| *o += b);
                }
                Some((nodes[self.id].shape.clone(), v))
            }
        };
        match res {
            Some((shape, v)) => Ok(self.binary(row, shape, v, Op::AddRow(self.id, row.id))),
            None => Err(self.mismatch(&row, "add_row")),
        }
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let (shape, v) = self.with(|n| (n.shape.clone(), n.value.iter().map(|x| x * s).collect()));
        self.unary(shape, v, Op::Scale(self.id, s))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.check_same(&s)?;
        let res = {
            let nodes = self.tape.nodes.borrow();
            if nodes[s.id].value.len() != 1 {
                None
            } else {
                let sv = nodes[s.id].value[0];
                Some((
                    nodes[self.id].shape.clone(),
                    nodes[self.id].value.iter().map(|x| x * sv).collect(),
                ))
            }
        };
        match res {
            Some((shape, v)) => Ok(self.binary(s, shape, v, Op::ScaleBy(self.id, s.id))),
            None => Err(self.mismatch(&s, "scale_by")),
        }
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let (shape, v) = self.with(|n| (n.shape.clone(), n.value.iter().map(|x| x + c).collect()));
        self.unary(shape, v, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let (shape, v) = self.with(|n| {
            (
                n.shape.clone(),
                n.value.iter().map(|&x| x.max(0.0)).collect(),
            )
        });
        self.unary(shape, v, Op::Relu(self.id))
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows; a vector
    /// only has axis 0).
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (shape, rank) = self.with(|n| (n.shape.clone(), n.shape.len()));
        let rows = match (rank, axis) {
            (1, 0) | (2, 1) => true,
            (2, 0) => false,
            _ => {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("axis {axis} invalid for shape {shape:?}"),
                })
            }
        };
        let v = self.with(|n| {
            let (r, c) = n.dims2();
            let mut out = vec![0.0; n.value.len()];
            if rows {
                for i in 0..r {
                    kernels::softmax_slice(
                        &n.value[i * c..(i + 1) * c],
                        &mut out[i * c..(i + 1) * c],
                    );
                }
            } else {
                let mut col = vec![0.0; r];
                let mut res = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = n.value[i * c + j];
                    }
                    kernels::softmax_slice(&col, &mut res);
                    for i in 0..r {
                        out[i * c + j] = res[i];
                    }
                }
            }
            out
        });
        Ok(self.unary(shape, v, Op::Softmax { x: self.id, rows }))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let (shape, v) = self.with(|n| {
            let (r, c) = n.dims2();
            let mut out = vec![0.0; n.value.len()];
            for i in 0..r {
                kernels::log_softmax_slice(
                    &n.value[i * c..(i + 1) * c],
                    &mut out[i * c..(i + 1) * c],
                );
            }
            (n.shape.clone(), out)
        });
        self.unary(shape, v, Op::LogSoftmaxRows(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with(|n| n.value.iter().sum::<f64>());
        self.unary(vec![1], vec![s], Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.with(|n| n.value.iter().sum::<f64>() / n.value.len() as f64);
        self.unary(vec![1], vec![s], Op::Mean(self.id))
    }

    /// Sums over the row axis: `[r, c] -> [1, c]`.
    pub fn sum_rows(self) -> Var<'t> {
        let (c, v) = self.with(|n| {
            let (r, c) = n.dims2();
            let mut out = vec![0.0; c];
            for i in 0..r {
                out.iter_mut()
                    .zip(&n.value[i * c..(i + 1) * c])
                    .for_each(|(o, x)| *o += x);
            }
            (c, out)
        });
        self.unary(vec![1, c], v, Op::SumRows(self.id))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let res = self.with(|n| {
            let (r, c) = n.dims2();
            if start >= end || end > c {
                return None;
            }
            let w = end - start;
            let mut v = Vec::with_capacity(r * w);
            for i in 0..r {
                v.extend_from_slice(&n.value[i * c + start..i * c + end]);
            }
            Some((r, w, v))
        });
        match res {
            Some((r, w, v)) => Ok(self.unary(vec![r, w], v, Op::SliceCols { x: self.id, start })),
            None => Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} invalid for shape {:?}", self.shape()),
            }),
        }
    }

    /// Sets entries above the diagonal to `-inf` (strict causal mask).
    pub fn causal_mask(self) -> Var<'t> {
        let (shape, v) = self.with(|n| {
            let (r, c) = n.dims2();
            let mut v = n.value.clone();
            for i in 0..r {
                for j in (i + 1)..c {
                    v[i * c + j] = f64::NEG_INFINITY;
                }
            }
            (n.shape.clone(), v)
        });
        self.unary(shape, v, Op::CausalMask(self.id))
    }

    /// Gathers entries by flat row-major index into a vector.
    pub fn select(self, idx: &[usize]) -> Result<Var<'t>> {
        let len = self.with(|n| n.value.len());
        if idx.is_empty() || idx.iter().any(|&i| i >= len) {
            return Err(TensorError::Invalid {
                op: "select",
                msg: format!("indices {idx:?} invalid for {len} elements"),
            });
        }
        let v = self.with(|n| idx.iter().map(|&i| n.value[i]).collect());
        Ok(self.unary(
            vec![idx.len()],
            v,
            Op::Select {
                x: self.id,
                idx: idx.to_vec(),
            },
        ))
    }
}
