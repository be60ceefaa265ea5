//! Reverse-mode automatic differentiation on an operation tape.
//!
//! Values live in an arena; [`Var`] handles index into it. Recording an op
//! appends a node whose parents are earlier entries, so reverse index order
//! is a valid reverse topological order for [`Tape::backward`]. Gradients
//! accumulate additively across uses, and nodes whose inputs all have
//! `needs_grad == false` are skipped entirely, which is what keeps frozen
//! model parameters free of gradient work.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Adjacency, EdgeKind};
use crate::kernels::{self, AggMode, NO_WINNER};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Where each output column of [`Tape::assemble_cols`] comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColSource {
    /// Column k of the first (per-row) input.
    A(usize),
    /// Column k of the second input, a single row broadcast to every row.
    B(usize),
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRowVec { a: Var, row: Var },
    Scale { a: Var, factor: f64 },
    ElemMul { a: Var, b: Var },
    Abs { a: Var },
    Relu { a: Var },
    SoftmaxRows { a: Var },
    LogSoftmaxRows { a: Var },
    GatherRows { a: Var, rows: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { a: Var, b: Var },
    ConcatRows { parts: Vec<Var> },
    BroadcastRows { row: Var },
    MeanRows { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    PickMean { a: Var, picks: Vec<(usize, usize)> },
    AssembleCols { a: Var, b: Var, sources: Vec<ColSource> },
    Aggregate {
        feats: Var,
        weights: Var,
        adj: Rc<Adjacency>,
        mode: AggMode,
        winners: Vec<u32>,
    },
    AttentionAggregate {
        feats: Var,
        weights: Var,
        attn: Var,
        adj: Rc<Adjacency>,
        alphas: Vec<f64>,
        dscores: Vec<f64>,
    },
    ScaleByScalar { a: Var, s: Var },
    StraightThrough { a: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zero-filled when backward never reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn derived(&mut self, value: Tensor, parents: &[Var], op: Op) -> Var {
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.push(value, needs_grad, op)
    }

    // ------------------------------------------------------ forward ops --

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(value, &[a, b], Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape_string(),
                right: tb.shape_string(),
            });
        }
        let mut value = ta.clone();
        value.add_assign(tb)?;
        Ok(self.derived(value, &[a, b], Op::Add { a, b }))
    }

    /// Adds a 1-row bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: ta.shape_string(),
                right: tr.shape_string(),
            });
        }
        let mut value = ta.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(tr.row(0)) {
                *o += b;
            }
        }
        Ok(self.derived(value, &[a, row], Op::AddRowVec { a, row }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(factor);
        self.derived(value, &[a], Op::Scale { a, factor })
    }

    pub fn elem_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "elem_mul",
                left: ta.shape_string(),
                right: tb.shape_string(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        Ok(self.derived(value, &[a, b], Op::ElemMul { a, b }))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.abs()).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data).expect("shape preserved");
        self.derived(value, &[a], Op::Abs { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data).expect("shape preserved");
        self.derived(value, &[a], Op::Relu { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut value = ta.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.derived(value, &[a], Op::SoftmaxRows { a })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut value = ta.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for x in row.iter_mut() {
                *x -= log_sum;
            }
        }
        self.derived(value, &[a], Op::LogSoftmaxRows { a })
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= ta.rows()) {
            return Err(Error::Validation(format!(
                "gather_rows index {bad} outside 0..{}",
                ta.rows()
            )));
        }
        let mut value = Tensor::zeros(rows.len(), ta.cols());
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(ta.row(r));
        }
        Ok(self.derived(value, &[a], Op::GatherRows { a, rows: rows.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() || len == 0 {
            return Err(Error::Validation(format!(
                "column slice ({start}, {len}) outside matrix with {} columns",
                ta.cols()
            )));
        }
        let mut value = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            value.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        Ok(self.derived(value, &[a], Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: ta.shape_string(),
                right: tb.shape_string(),
            });
        }
        let mut value = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
        for r in 0..ta.rows() {
            let row = value.row_mut(r);
            row[..ta.cols()].copy_from_slice(ta.row(r));
            row[ta.cols()..].copy_from_slice(tb.row(r));
        }
        Ok(self.derived(value, &[a, b], Op::ConcatCols { a, b }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Validation("concat_rows needs at least one part".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape_string(),
                    right: tp.shape_string(),
                });
            }
            rows.extend_from_slice(tp.data());
        }
        let total = rows.len() / cols;
        let value = Tensor::from_vec(total, cols, rows)?;
        Ok(self.derived(value, parts, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Repeats a 1-row vector `count` times.
    pub fn broadcast_rows(&mut self, row: Var, count: usize) -> Result<Var> {
        let tr = self.value(row);
        if tr.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                left: tr.shape_string(),
                right: "1 x n".into(),
            });
        }
        let mut value = Tensor::zeros(count, tr.cols());
        for r in 0..count {
            value.row_mut(r).copy_from_slice(tr.row(0));
        }
        Ok(self.derived(value, &[row], Op::BroadcastRows { row }))
    }

    /// Column means over all rows, as a 1-row vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(Error::Validation("mean_rows over an empty matrix".into()));
        }
        let mut value = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, &x) in value.row_mut(0).iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        value.scale_assign(1.0 / ta.rows() as f64);
        Ok(self.derived(value, &[a], Op::MeanRows { a }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(total), &[a], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() == 0 {
            return Err(Error::Validation("mean_all over an empty matrix".into()));
        }
        let mean = ta.data().iter().sum::<f64>() / ta.len() as f64;
        Ok(self.derived(Tensor::scalar(mean), &[a], Op::MeanAll { a }))
    }

    /// Mean of the picked (row, col) entries, as a scalar.
    pub fn pick_mean(&mut self, a: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        if picks.is_empty() {
            return Err(Error::Validation("pick_mean needs at least one entry".into()));
        }
        for &(r, c) in picks {
            if r >= ta.rows() || c >= ta.cols() {
                return Err(Error::Validation(format!(
                    "pick ({r}, {c}) outside matrix of shape {}",
                    ta.shape_string()
                )));
            }
        }
        let mean = picks.iter().map(|&(r, c)| ta.at(r, c)).sum::<f64>() / picks.len() as f64;
        Ok(self.derived(
            Tensor::scalar(mean),
            &[a],
            Op::PickMean { a, picks: picks.to_vec() },
        ))
    }

    /// Builds a matrix column-by-column from per-row input `a` and a 1-row
    /// input `b` broadcast down every column it supplies.
    pub fn assemble_cols(&mut self, a: Var, b: Var, sources: &[ColSource]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "assemble_cols",
                left: ta.shape_string(),
                right: tb.shape_string(),
            });
        }
        for &s in sources {
            let ok = match s {
                ColSource::A(k) => k < ta.cols(),
                ColSource::B(k) => k < tb.cols(),
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "assemble_cols source {s:?} outside inputs {} and {}",
                    ta.shape_string(),
                    tb.shape_string()
                )));
            }
        }
        let mut value = Tensor::zeros(ta.rows(), sources.len());
        for r in 0..ta.rows() {
            let row = value.row_mut(r);
            for (j, &s) in sources.iter().enumerate() {
                row[j] = match s {
                    ColSource::A(k) => ta.at(r, k),
                    ColSource::B(k) => tb.at(0, k),
                };
            }
        }
        Ok(self.derived(
            value,
            &[a, b],
            Op::AssembleCols { a, b, sources: sources.to_vec() },
        ))
    }

    /// Weighted neighbor aggregation over an adjacency structure.
    pub fn aggregate(
        &mut self,
        feats: Var,
        weights: Var,
        adj: Rc<Adjacency>,
        mode: AggMode,
    ) -> Result<Var> {
        let tf = self.value(feats);
        if tf.rows() != adj.num_nodes() {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                left: tf.shape_string(),
                right: format!("{} graph nodes", adj.num_nodes()),
            });
        }
        let cols = tf.cols();
        let (out, winners) = kernels::aggregate(
            tf.data(),
            cols,
            self.value(weights).data(),
            &adj,
            mode,
        );
        let value = Tensor::from_vec(adj.num_nodes(), cols, out)?;
        Ok(self.derived(
            value,
            &[feats, weights],
            Op::Aggregate { feats, weights, adj, mode, winners },
        ))
    }

    /// Attention-lite aggregation; `attn` is the 1 x 2*cols score vector.
    pub fn attention_aggregate(
        &mut self,
        feats: Var,
        weights: Var,
        attn: Var,
        adj: Rc<Adjacency>,
    ) -> Result<Var> {
        let (tf, tat) = (self.value(feats), self.value(attn));
        if tf.rows() != adj.num_nodes() || tat.rows() != 1 || tat.cols() != 2 * tf.cols() {
            return Err(Error::ShapeMismatch {
                op: "attention_aggregate",
                left: tf.shape_string(),
                right: tat.shape_string(),
            });
        }
        let cols = tf.cols();
        let fwd = kernels::attention_aggregate(
            tf.data(),
            cols,
            self.value(weights).data(),
            &adj,
            tat.data(),
        );
        let value = Tensor::from_vec(adj.num_nodes(), cols, fwd.out)?;
        Ok(self.derived(
            value,
            &[feats, weights, attn],
            Op::AttentionAggregate {
                feats,
                weights,
                attn,
                adj,
                alphas: fwd.alphas,
                dscores: fwd.dscores,
            },
        ))
    }

    /// Multiplies every entry of `a` by a scalar (1 x 1) tape value.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                left: self.value(a).shape_string(),
                right: ts.shape_string(),
            });
        }
        let factor = ts.at(0, 0);
        let mut value = self.value(a).clone();
        value.scale_assign(factor);
        Ok(self.derived(value, &[a, s], Op::ScaleByScalar { a, s }))
    }

    /// Forward takes `hard`'s value; backward passes gradients straight to
    /// `a` (the straight-through estimator).
    pub fn straight_through(&mut self, a: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.value(a).shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                left: self.value(a).shape_string(),
                right: hard.shape_string(),
            });
        }
        Ok(self.derived(hard, &[a], Op::StraightThrough { a }))
    }

    // -------------------------------------------------------- backward --

    /// Populates gradients of every `needs_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {}",
                self.value(loss).shape_string()
            )));
        }
        let seed = &mut self.nodes[loss.0];
        match &mut seed.grad {
            Some(g) => g.data_mut()[0] += 1.0,
            None => seed.grad = Some(Tensor::scalar(1.0)),
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().expect("checked above");
            let contributions = self.contributions(idx, &grad);
            for (parent, piece) in contributions {
                let node = &mut self.nodes[parent.0];
                match &mut node.grad {
                    Some(g) => g.add_assign(&piece).expect("gradient shape"),
                    None => node.grad = Some(piece),
                }
            }
        }
        Ok(())
    }

    fn contributions(&self, idx: usize, grad: &Tensor) -> Vec<(Var, Tensor)> {
        let mut out: Vec<(Var, Tensor)> = Vec::new();
        let value = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.needs(*a) {
                    out.push((*a, grad.matmul_nt(self.value(*b)).expect("shape")));
                }
                if self.needs(*b) {
                    out.push((*b, self.value(*a).matmul_tn(grad).expect("shape")));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, grad.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, grad.clone()));
                }
            }
            Op::AddRowVec { a, row } => {
                if self.needs(*a) {
                    out.push((*a, grad.clone()));
                }
                if self.needs(*row) {
                    out.push((*row, column_sums(grad)));
                }
            }
            Op::Scale { a, factor } => {
                if self.needs(*a) {
                    let mut g = grad.clone();
                    g.scale_assign(*factor);
                    out.push((*a, g));
                }
            }
            Op::ElemMul { a, b } => {
                if self.needs(*a) {
                    out.push((*a, elementwise_product(grad, self.value(*b))));
                }
                if self.needs(*b) {
                    out.push((*b, elementwise_product(grad, self.value(*a))));
                }
            }
            Op::Abs { a } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let data = grad
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&g, &x)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    out.push((*a, Tensor::from_vec(ta.rows(), ta.cols(), data).expect("shape")));
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let data = grad
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    out.push((*a, Tensor::from_vec(ta.rows(), ta.cols(), data).expect("shape")));
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let mut g = Tensor::zeros(value.rows(), value.cols());
                    for r in 0..value.rows() {
                        let y = value.row(r);
                        let gy = grad.row(r);
                        let dot: f64 = y.iter().zip(gy).map(|(yi, gi)| yi * gi).sum();
                        for (o, (yi, gi)) in g.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                            *o = yi * (gi - dot);
                        }
                    }
                    out.push((*a, g));
                }
            }
            Op::LogSoftmaxRows { a } => {
                if self.needs(*a) {
                    let mut g = Tensor::zeros(value.rows(), value.cols());
                    for r in 0..value.rows() {
                        let logp = value.row(r);
                        let gy = grad.row(r);
                        let total: f64 = gy.iter().sum();
                        for (o, (lp, gi)) in g.row_mut(r).iter_mut().zip(logp.iter().zip(gy)) {
                            *o = gi - lp.exp() * total;
                        }
                    }
                    out.push((*a, g));
                }
            }
            Op::GatherRows { a, rows } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let mut g = Tensor::zeros(ta.rows(), ta.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &gi) in g.row_mut(r).iter_mut().zip(grad.row(i)) {
                            *o += gi;
                        }
                    }
                    out.push((*a, g));
                }
            }
            Op::SliceCols { a, start } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let mut g = Tensor::zeros(ta.rows(), ta.cols());
                    for r in 0..grad.rows() {
                        g.row_mut(r)[*start..*start + grad.cols()].copy_from_slice(grad.row(r));
                    }
                    out.push((*a, g));
                }
            }
            Op::ConcatCols { a, b } => {
                let a_cols = self.value(*a).cols();
                if self.needs(*a) {
                    let mut g = Tensor::zeros(grad.rows(), a_cols);
                    for r in 0..grad.rows() {
                        g.row_mut(r).copy_from_slice(&grad.row(r)[..a_cols]);
                    }
                    out.push((*a, g));
                }
                if self.needs(*b) {
                    let b_cols = grad.cols() - a_cols;
                    let mut g = Tensor::zeros(grad.rows(), b_cols);
                    for r in 0..grad.rows() {
                        g.row_mut(r).copy_from_slice(&grad.row(r)[a_cols..]);
                    }
                    out.push((*b, g));
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let mut g = Tensor::zeros(rows, grad.cols());
                        for r in 0..rows {
                            g.row_mut(r).copy_from_slice(grad.row(offset + r));
                        }
                        out.push((p, g));
                    }
                    offset += rows;
                }
            }
            Op::BroadcastRows { row } => {
                if self.needs(*row) {
                    out.push((*row, column_sums(grad)));
                }
            }
            Op::MeanRows { a } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let scale = 1.0 / ta.rows() as f64;
                    let mut g = Tensor::zeros(ta.rows(), ta.cols());
                    for r in 0..ta.rows() {
                        for (o, &gi) in g.row_mut(r).iter_mut().zip(grad.row(0)) {
                            *o = gi * scale;
                        }
                    }
                    out.push((*a, g));
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let mut g = Tensor::zeros(ta.rows(), ta.cols());
                    g.data_mut().fill(grad.at(0, 0));
                    out.push((*a, g));
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let mut g = Tensor::zeros(ta.rows(), ta.cols());
                    g.data_mut().fill(grad.at(0, 0) / ta.len() as f64);
                    out.push((*a, g));
                }
            }
            Op::PickMean { a, picks } => {
                if self.needs(*a) {
                    let ta = self.value(*a);
                    let mut g = Tensor::zeros(ta.rows(), ta.cols());
                    let share = grad.at(0, 0) / picks.len() as f64;
                    for &(r, c) in picks {
                        g.set(r, c, g.at(r, c) + share);
                    }
                    out.push((*a, g));
                }
            }
            Op::AssembleCols { a, b, sources } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                let mut gb = Tensor::zeros(1, tb.cols());
                for (j, &s) in sources.iter().enumerate() {
                    match s {
                        ColSource::A(k) => {
                            for r in 0..grad.rows() {
                                ga.set(r, k, ga.at(r, k) + grad.at(r, j));
                            }
                        }
                        ColSource::B(k) => {
                            let mut sum = 0.0;
                            for r in 0..grad.rows() {
                                sum += grad.at(r, j);
                            }
                            gb.set(0, k, gb.at(0, k) + sum);
                        }
                    }
                }
                if self.needs(*a) {
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Aggregate { feats, weights, adj, mode, winners } => {
                let tf = self.value(*feats);
                let tw = self.value(*weights);
                let cols = tf.cols();
                let mut gf = Tensor::zeros(tf.rows(), tf.cols());
                let mut gw = Tensor::zeros(tw.rows(), tw.cols());
                match mode {
                    AggMode::Sum => {
                        for v in 0..adj.num_nodes() {
                            for entry in adj.entries(v) {
                                let w = entry.kind.weight(tw.data());
                                let gv = grad.row(v);
                                if w != 0.0 {
                                    for (o, &gi) in
                                        gf.row_mut(entry.src).iter_mut().zip(gv)
                                    {
                                        *o += w * gi;
                                    }
                                }
                                if let EdgeKind::Edge(e) = entry.kind {
                                    let dot: f64 = tf
                                        .row(entry.src)
                                        .iter()
                                        .zip(gv)
                                        .map(|(f, g)| f * g)
                                        .sum();
                                    gw.data_mut()[e] += dot;
                                }
                            }
                        }
                    }
                    AggMode::Mean => {
                        for v in 0..adj.num_nodes() {
                            let entries = adj.entries(v);
                            let denom: f64 = entries
                                .iter()
                                .map(|e| e.kind.weight(tw.data()))
                                .sum();
                            if denom == 0.0 {
                                continue;
                            }
                            let gv = grad.row(v);
                            let out_row = value.row(v);
                            for entry in entries {
                                let w = entry.kind.weight(tw.data());
                                if w != 0.0 {
                                    for (o, &gi) in
                                        gf.row_mut(entry.src).iter_mut().zip(gv)
                                    {
                                        *o += w / denom * gi;
                                    }
                                }
                                if let EdgeKind::Edge(e) = entry.kind {
                                    let mut dot = 0.0;
                                    for j in 0..cols {
                                        dot += gv[j] * (tf.at(entry.src, j) - out_row[j]);
                                    }
                                    gw.data_mut()[e] += dot / denom;
                                }
                            }
                        }
                    }
                    AggMode::Max => {
                        for v in 0..adj.num_nodes() {
                            let entries = adj.entries(v);
                            for j in 0..cols {
                                let win = winners[v * cols + j];
                                if win == NO_WINNER {
                                    continue;
                                }
                                let entry = entries[win as usize];
                                let w = entry.kind.weight(tw.data());
                                let gi = grad.at(v, j);
                                gf.set(entry.src, j, gf.at(entry.src, j) + w * gi);
                                if let EdgeKind::Edge(e) = entry.kind {
                                    gw.data_mut()[e] += tf.at(entry.src, j) * gi;
                                }
                            }
                        }
                    }
                }
                if self.needs(*feats) {
                    out.push((*feats, gf));
                }
                if self.needs(*weights) {
                    out.push((*weights, gw));
                }
            }
            Op::AttentionAggregate { feats, weights, attn, adj, alphas, dscores } => {
                let tf = self.value(*feats);
                let tw = self.value(*weights);
                let tat = self.value(*attn);
                let cols = tf.cols();
                let (a_left, a_right) = tat.row(0).split_at(cols);
                let mut gf = Tensor::zeros(tf.rows(), tf.cols());
                let mut gw = Tensor::zeros(tw.rows(), tw.cols());
                let mut gat = Tensor::zeros(1, tat.cols());
                for v in 0..adj.num_nodes() {
                    let entries = adj.entries(v);
                    if entries.is_empty() {
                        continue;
                    }
                    let range = adj.entry_range(v);
                    let gv = grad.row(v);
                    // direct message path and dL/dalpha per entry
                    let mut dalpha = vec![0.0; entries.len()];
                    for (k, entry) in entries.iter().enumerate() {
                        let alpha = alphas[range.start + k];
                        let w = entry.kind.weight(tw.data());
                        let dot: f64 = tf
                            .row(entry.src)
                            .iter()
                            .zip(gv)
                            .map(|(f, g)| f * g)
                            .sum();
                        dalpha[k] = w * dot;
                        if w != 0.0 {
                            for (o, &gi) in gf.row_mut(entry.src).iter_mut().zip(gv) {
                                *o += alpha * w * gi;
                            }
                        }
                        if let EdgeKind::Edge(e) = entry.kind {
                            gw.data_mut()[e] += alpha * dot;
                        }
                    }
                    // softmax backward to scores, then through leaky-relu
                    let alpha_dot: f64 = entries
                        .iter()
                        .enumerate()
                        .map(|(k, _)| alphas[range.start + k] * dalpha[k])
                        .sum();
                    for (k, entry) in entries.iter().enumerate() {
                        let alpha = alphas[range.start + k];
                        let dz = alpha * (dalpha[k] - alpha_dot) * dscores[range.start + k];
                        if dz == 0.0 {
                            continue;
                        }
                        let (gl, gr) = gat.row_mut(0).split_at_mut(cols);
                        for (j, g) in gl.iter_mut().enumerate() {
                            *g += dz * tf.at(entry.src, j);
                        }
                        for (j, g) in gr.iter_mut().enumerate() {
                            *g += dz * tf.at(v, j);
                        }
                        for (j, o) in gf.row_mut(entry.src).iter_mut().enumerate() {
                            *o += dz * a_left[j];
                        }
                        for (j, o) in gf.row_mut(v).iter_mut().enumerate() {
                            *o += dz * a_right[j];
                        }
                    }
                }
                if self.needs(*feats) {
                    out.push((*feats, gf));
                }
                if self.needs(*weights) {
                    out.push((*weights, gw));
                }
                if self.needs(*attn) {
                    out.push((*attn, gat));
                }
            }
            Op::ScaleByScalar { a, s } => {
                if self.needs(*a) {
                    let mut g = grad.clone();
                    g.scale_assign(self.value(*s).at(0, 0));
                    out.push((*a, g));
                }
                if self.needs(*s) {
                    let dot: f64 = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(x, g)| x * g)
                        .sum();
                    out.push((*s, Tensor::scalar(dot)));
                }
            }
            Op::StraightThrough { a } => {
                if self.needs(*a) {
                    out.push((*a, grad.clone()));
                }
            }
        }
        out
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn column_sums(grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, grad.cols());
    for r in 0..grad.rows() {
        for (o, &g) in out.row_mut(0).iter_mut().zip(grad.row(r)) {
            *o += g;
        }
    }
    out
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("matching shapes")
}

// -------------------------------------------------------------- checking --

/// Comparison of analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_abs_err: f64,
    /// Worst per-coordinate error relative to max(|analytic|, |numeric|, 1);
    /// the unit floor keeps finite-difference noise from dominating
    /// near-zero gradients.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the tape gradient of a scalar-valued function at `point` with
/// central finite differences of step `h`.
pub fn grad_check<F>(point: &Tensor, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |at: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(at.clone());
        let loss = f(&mut tape, x)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Validation(
                "grad_check needs a scalar-valued function".into(),
            ));
        }
        Ok(tape.value(loss).at(0, 0))
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Validation(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic = tape.grad_or_zeros(x);

    let mut numeric = Tensor::zeros(point.rows(), point.cols());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
    }

    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / a.abs().max(n.abs()).max(1.0));
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_abs_err,
        max_rel_err,
    })
}
