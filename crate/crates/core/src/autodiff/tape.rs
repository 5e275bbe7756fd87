//! Tape-based reverse-mode differentiation over matrix primitives.
//!
//! Operations append nodes to a [`Tape`] in evaluation order, so the tape is
//! acyclic by construction and a single reverse sweep visits every node after
//! all of its consumers. Parameter leaves borrow their values, which keeps a
//! forward pass from copying the model.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Gelu(NodeId),
    MaskedSoftmax(NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    Gather(NodeId, Vec<usize>),
    SelectRow(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SquaredError(NodeId, f64),
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

/// A single-use recording of a computation.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    constants: Vec<Matrix>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// An owned input leaf.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    /// A borrowed leaf, typically a model parameter.
    pub fn borrowed(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Stores a non-differentiable constant (an attention mask).
    pub fn constant(&mut self, value: Matrix) -> ConstId {
        self.constants.push(value);
        ConstId(self.constants.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn v(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::matmul(self.v(a), self.v(b))?;
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::matmul_nt(self.v(a), self.v(b))?;
        Ok(self.push(Cow::Owned(out), Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::add(self.v(a), self.v(b))?;
        Ok(self.push(Cow::Owned(out), Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = tensor::add_row(self.v(a), self.v(bias))?;
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, bias)))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.v(a).clone();
        out.scale_in_place(s);
        self.push(Cow::Owned(out), Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).map(f64::tanh);
        self.push(Cow::Owned(out), Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).map(tensor::gelu);
        self.push(Cow::Owned(out), Op::Gelu(a))
    }

    /// Row softmax of `logits + mask`; the mask is a constant.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: Option<ConstId>) -> Result<NodeId> {
        let out = tensor::masked_softmax(self.v(logits), mask.map(|m| &self.constants[m.0]))?;
        Ok(self.push(Cow::Owned(out), Op::MaskedSoftmax(logits)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = tensor::layer_norm(self.v(x), self.v(gain), self.v(bias))?;
        Ok(self.push(Cow::Owned(out), Op::LayerNorm(x, gain, bias)))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let out = tensor::gather_rows(self.v(table), &ids)?;
        Ok(self.push(Cow::Owned(out), Op::Gather(table, ids)))
    }

    pub fn select_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let src = self.v(a);
        if row >= src.rows() {
            return Err(Error::IndexOutOfRange {
                index: row,
                len: src.rows(),
            });
        }
        let out = Matrix::row_vector(src.row(row).to_vec());
        Ok(self.push(Cow::Owned(out), Op::SelectRow(a, row)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        if start > end || end > self.v(a).cols() {
            return Err(Error::Shape(format!(
                "column slice {start}..{end} of {:?}",
                self.v(a).shape()
            )));
        }
        let out = tensor::slice_cols(self.v(a), start, end);
        Ok(self.push(Cow::Owned(out), Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let out = {
            let mats: Vec<&Matrix> = parts.iter().map(|&p| self.v(p)).collect();
            tensor::concat_cols(&mats)?
        };
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts)))
    }

    /// `(a − target)²` for a `1 × 1` node.
    pub fn squared_error(&mut self, a: NodeId, target: f64) -> Result<NodeId> {
        let v = self.v(a);
        if v.shape() != (1, 1) {
            return Err(Error::Shape(format!("squared error on {:?}", v.shape())));
        }
        let diff = v.item() - target;
        Ok(self.push(Cow::Owned(Matrix::scalar(diff * diff)), Op::SquaredError(a, target)))
    }

    /// Elementwise sum of same-shaped nodes, accumulated left to right.
    pub fn sum(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("sum of nothing".into()))?;
        let mut out = self.v(*first).clone();
        for &p in &parts[1..] {
            let v = self.v(p);
            if v.shape() != out.shape() {
                return Err(Error::Shape(format!("sum {:?} + {:?}", out.shape(), v.shape())));
            }
            out.add_assign(v);
        }
        Ok(self.push(Cow::Owned(out), Op::Sum(parts)))
    }

    /// Reverse sweep from the scalar `loss`. A tape supports one sweep.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.v(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.v(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = tensor::matmul_nt(&g, self.v(*b))?;
                    let db = tensor::matmul_tn(self.v(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = tensor::matmul(&g, self.v(*b))?;
                    let db = tensor::matmul_tn(&g, self.v(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    da.scale_in_place(*s);
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let mut da = g;
                    for (d, y) in da.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let mut da = g;
                    for (d, x) in da.as_mut_slice().iter_mut().zip(self.v(*a).as_slice()) {
                        *d *= tensor::gelu_grad(*x);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let inner = tensor::dot(da.row(r), yr);
                        for (d, &p) in da.row_mut(r).iter_mut().zip(yr) {
                            *d = p * (*d - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm(x, gain, bias) => {
                    let (dx, dg, db) = layer_norm_backward(self.v(*x), self.v(*gain), &g);
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather(table, ids) => {
                    let t = self.v(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SelectRow(a, row) => {
                    let src = self.v(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    da.row_mut(*row).copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, end) => {
                    let src = self.v(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        da.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.v(p).cols();
                        accumulate(&mut grads, p, tensor::slice_cols(&g, offset, offset + width));
                        offset += width;
                    }
                }
                Op::SquaredError(a, target) => {
                    let diff = self.v(*a).item() - target;
                    accumulate(&mut grads, *a, Matrix::scalar(2.0 * diff * g.item()));
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn layer_norm_backward(x: &Matrix, gain: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
    let n = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dg = Matrix::zeros(1, x.cols());
    let mut db = Matrix::zeros(1, x.cols());
    let mut xhat = vec![0.0; x.cols()];
    let mut dxhat = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + tensor::LAYER_NORM_EPS).sqrt();
        let dyr = dy.row(r);
        for c in 0..x.cols() {
            xhat[c] = (row[c] - mean) * inv;
            dxhat[c] = dyr[c] * gain.as_slice()[c];
            dg.as_mut_slice()[c] += dyr[c] * xhat[c];
            db.as_mut_slice()[c] += dyr[c];
        }
        let sum_dxhat: f64 = dxhat.iter().sum();
        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = inv / n * (n * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
        }
    }
    (dx, dg, db)
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` if the loss does not depend
    /// on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}
