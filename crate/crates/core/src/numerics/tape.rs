//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables in evaluation
//! order. Because a node can only reference nodes recorded before it, the
//! recorded graph is acyclic by construction and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! ```
//! use cmcl::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
//! let zero = tape.constant(Tensor::zeros(&[2]));
//! let loss = tape.sq_frobenius_dist(x, zero).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, -4.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds, used to name ops in reports and to
/// target fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    AddRowBias,
    Add,
    Sub,
    Scale,
    Sum,
    Relu,
    LogSoftmax,
    BatchMean,
    BatchCovariance,
    SqFrobeniusDist,
    GatherSum,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::AddRowBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Relu,
        OpKind::LogSoftmax,
        OpKind::BatchMean,
        OpKind::BatchCovariance,
        OpKind::SqFrobeniusDist,
        OpKind::GatherSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Relu => "relu",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::BatchMean => "batch_mean",
            OpKind::BatchCovariance => "batch_covariance",
            OpKind::SqFrobeniusDist => "sq_frobenius_dist",
            OpKind::GatherSum => "gather_sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Relu(usize),
    LogSoftmax(usize),
    BatchMean(usize),
    BatchCovariance(usize),
    SqFrobeniusDist(usize, usize),
    GatherSum(usize, Vec<usize>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Constant => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Relu(_) => OpKind::Relu,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::BatchMean(_) => OpKind::BatchMean,
            Op::BatchCovariance(_) => OpKind::BatchCovariance,
            Op::SqFrobeniusDist(..) => OpKind::SqFrobeniusDist,
            Op::GatherSum(..) => OpKind::GatherSum,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only; build a fresh tape per
/// evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Multiplier applied to a faulted op's gradient. Any value far from 1
/// makes the fault visible to a finite-difference check.
const FAULT_FACTOR: f64 = 1.5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the gradient rule of `kind` on this tape. Used as a
    /// negative control for gradient checking.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input; [`Tape::backward`] reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Copies `v` into a new constant node, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a.0)))
    }

    /// `x + 1·biasᵀ`: adds a length-`d` vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        xv.require_matrix("add_row_bias")?;
        if bv.len() != xv.cols() {
            return Err(Error::dim("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let d = xv.cols();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x.0, bias.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a.0))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax()?;
        Ok(self.push(out, Op::LogSoftmax(a.0)))
    }

    pub fn batch_mean(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).batch_mean()?;
        Ok(self.push(out, Op::BatchMean(a.0)))
    }

    pub fn batch_covariance(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).batch_covariance()?;
        Ok(self.push(out, Op::BatchCovariance(a.0)))
    }

    pub fn sq_frobenius_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sq_frobenius_dist(self.value(b))?;
        Ok(self.push(Tensor::scalar(out), Op::SqFrobeniusDist(a.0, b.0)))
    }

    /// `Σ_r x[r, labels[r]]` for a `b × K` matrix.
    pub fn gather_sum(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        xv.require_matrix("gather_sum")?;
        if labels.len() != xv.rows() {
            return Err(Error::dim("gather_sum", xv.shape(), &[labels.len()]));
        }
        let k = xv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let total: f64 = labels.iter().enumerate().map(|(r, &y)| xv.get(r, y)).sum();
        Ok(self.push(Tensor::scalar(total), Op::GatherSum(x.0, labels.to_vec())))
    }

    /// Propagates d`loss`/d(node) back to every leaf.
    ///
    /// Leaves that `loss` does not depend on get a zero gradient. The tape is
    /// not modified, so repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut parents = self.local_grads(&node.op, &node.value, &g)?;
            if self.fault.is_some() && self.fault == node.op.kind() {
                for (_, pg) in &mut parents {
                    *pg = pg.scale(FAULT_FACTOR);
                }
            }
            for (p, pg) in parents {
                match &mut grads[p] {
                    Some(acc) => *acc = acc.add(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (i, g)
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let v = |i: usize| &self.nodes[i].value;
        Ok(match *op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b) => {
                let ga = g.matmul(&v(b).transpose()?)?;
                let gb = v(a).transpose()?.matmul(g)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => vec![(a, g.transpose()?)],
            Op::AddRowBias(x, bias) => {
                let d = g.cols();
                let mut gb = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (acc, &r) in gb.iter_mut().zip(row) {
                        *acc += r;
                    }
                }
                let gb = Tensor::new(v(bias).shape().to_vec(), gb)?;
                vec![(x, g.clone()), (bias, gb)]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0))],
            Op::Scale(a, s) => vec![(a, g.scale(s))],
            Op::Sum(a) => vec![(a, Tensor::filled(v(a).shape(), g.item()))],
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(v(a).data()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![(a, ga)]
            }
            Op::LogSoftmax(a) => {
                // dx = g − softmax ⊙ rowsum(g), softmax = exp(out)
                let k = out.cols();
                let mut ga = g.clone();
                for (grow, orow) in ga.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, &o) in grow.iter_mut().zip(orow) {
                        *gv -= o.exp() * total;
                    }
                }
                vec![(a, ga)]
            }
            Op::BatchMean(a) => {
                let x = v(a);
                let (b, d) = (x.rows(), x.cols());
                let inv = 1.0 / b as f64;
                let row: Vec<f64> = g.data().iter().map(|&gv| gv * inv).collect();
                let data = row.iter().copied().cycle().take(b * d).collect();
                vec![(a, Tensor::new(vec![b, d], data)?)]
            }
            Op::BatchCovariance(a) => {
                // dx_r = (G + Gᵀ)(x_r − μ) / (b − 1); the path through μ sums to zero.
                let x = v(a);
                let (b, d) = (x.rows(), x.cols());
                let mean = x.batch_mean()?;
                let sym = g.add(&g.transpose()?)?;
                let inv = 1.0 / (b - 1) as f64;
                let mut ga = vec![0.0; b * d];
                let mut centered = vec![0.0; d];
                for (r, row) in x.data().chunks(d).enumerate() {
                    for ((c, &xv), &m) in centered.iter_mut().zip(row).zip(mean.data()) {
                        *c = xv - m;
                    }
                    for i in 0..d {
                        let s: f64 = sym.row(i).iter().zip(&centered).map(|(a, b)| a * b).sum();
                        ga[r * d + i] = s * inv;
                    }
                }
                vec![(a, Tensor::new(vec![b, d], ga)?)]
            }
            Op::SqFrobeniusDist(a, b) => {
                let diff = v(a).sub(v(b))?.scale(2.0 * g.item());
                let neg = diff.scale(-1.0);
                vec![(a, diff), (b, neg)]
            }
            Op::GatherSum(x, ref labels) => {
                let mut gx = Tensor::zeros(v(x).shape());
                let k = gx.cols();
                let gv = g.item();
                for (r, &y) in labels.iter().enumerate() {
                    gx.data_mut()[r * k + y] += gv;
                }
                vec![(x, gx)]
            }
        })
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient for a leaf. Panics if `v` is not a leaf of the tape these
    /// gradients came from.
    pub fn get(&self, v: Var) -> &Tensor {
        self.try_get(v).expect("variable is not a leaf of this tape")
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&v.0, |(i, _)| *i)
            .ok()
            .map(|pos| &self.leaves[pos].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.leaves.iter().map(|(i, t)| (Var(*i), t))
    }
}
