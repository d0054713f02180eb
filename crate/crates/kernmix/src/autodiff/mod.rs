//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward operation appends one node holding its inputs, its computed
//! value and enough metadata to replay the chain rule. `backward` walks the
//! tape once in reverse, accumulating gradients into every node that was
//! created with `requires_grad`. Construction order is evaluation order, so
//! the reverse walk is already topological.

pub mod gradcheck;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// [r, c] plus a length-c vector added to every row.
    AddRows(NodeId, NodeId),
    /// [r, c] divided row-wise by a length-r vector.
    DivRows(NodeId, NodeId),
    /// Tensor divided by a scalar node.
    DivScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Neg(NodeId),
    Relu(NodeId),
    ClampMin(NodeId, f64),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Log-softmax over the last axis.
    LogSoftmax(NodeId),
    /// Stable log(sum(exp(x))) of a vector, yielding a scalar.
    LogSumExp(NodeId),
    /// Squared Euclidean distance between two equally shaped tensors.
    SqDist(NodeId, NodeId),
    /// Squared distances from a vector [d] to every row of a constant [n, d].
    DistsToRows { x: NodeId, rows: Arc<Tensor> },
    /// All pairwise squared distances between rows of [b, d], yielding [b, b].
    PairwiseSqDist(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// [r, c] summed over the last axis, yielding [r].
    SumLastAxis(NodeId),
    /// Sum of several scalar nodes.
    SumMany(Vec<NodeId>),
    /// Row `i` of the leading axis.
    Row(NodeId, usize),
    /// 1-D gather; repeated indices accumulate gradient.
    Gather(NodeId, Vec<usize>),
    /// Gather of rows along the leading axis.
    GatherRows(NodeId, Vec<usize>),
    /// out[r] = input[r, idx[r]] for a [r, c] input.
    PickPerRow(NodeId, Vec<usize>),
    /// Single element of a vector, yielding a scalar.
    Index(NodeId, usize),
    Reshape(NodeId),
    /// 3x3 same-padding patch extraction: [b, h, w, c] -> [b*h*w, 9c].
    Im2Col {
        input: NodeId,
        b: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    /// 2x2 max pooling with stride 2: [b, h, w, c] -> [b, h/2, w/2, c].
    /// `argmax` holds the flat input index that won each output cell.
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_scaled(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Row-major [m, k] x [k, n] product.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            add_scaled(orow, brow, aip);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                what: "tape node",
                index: id,
                size: self.nodes.len(),
            })
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let shape = value.shape().to_vec();
        let data = value.into_data();
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value), false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].data.clone())
            .expect("tape nodes hold consistent shapes")
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id];
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(Error::NotScalar {
                op: "scalar_value",
                shape: n.shape.clone(),
            })
        }
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    /// `None` until `backward` has run, or for nodes without `requires_grad`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn binary_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check(a)?;
        let data = self.nodes[a].data.iter().map(|x| x + s).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::AddScalar(a), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check(a)?;
        let data = self.nodes[a].data.iter().map(|x| x * s).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::MulScalar(a, s), self.nodes[a].shape.clone(), data, rg))
    }

    fn rows_cols(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let shape = &self.nodes[id].shape;
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.clone(),
                rhs: vec![],
            });
        }
        let rows = shape[0];
        let cols = if rows == 0 {
            0
        } else {
            self.nodes[id].data.len() / rows
        };
        Ok((rows, cols))
    }

    /// out[r, :] = m[r, :] + v for a vector v of length matching the rows.
    pub fn add_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(m)?;
        self.check(v)?;
        let (rows, cols) = self.rows_cols("add_rows", m)?;
        if self.nodes[v].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_rows",
                lhs: self.nodes[m].shape.clone(),
                rhs: self.nodes[v].shape.clone(),
            });
        }
        let mut data = self.nodes[m].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[v].data[c];
            }
        }
        let rg = self.requires(m) || self.requires(v);
        Ok(self.push(Op::AddRows(m, v), self.nodes[m].shape.clone(), data, rg))
    }

    /// out[r, :] = m[r, :] / v[r] for a vector v of one divisor per row.
    pub fn div_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(m)?;
        self.check(v)?;
        let (rows, cols) = self.rows_cols("div_rows", m)?;
        if self.nodes[v].data.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "div_rows",
                lhs: self.nodes[m].shape.clone(),
                rhs: self.nodes[v].shape.clone(),
            });
        }
        if self.nodes[v].data.iter().any(|&x| x == 0.0) {
            return Err(Error::Domain {
                op: "div_rows",
                msg: "zero divisor".to_string(),
            });
        }
        let mut data = self.nodes[m].data.clone();
        for r in 0..rows {
            let d = self.nodes[v].data[r];
            for c in 0..cols {
                data[r * cols + c] /= d;
            }
        }
        let rg = self.requires(m) || self.requires(v);
        Ok(self.push(Op::DivRows(m, v), self.nodes[m].shape.clone(), data, rg))
    }

    /// Tensor divided by a scalar node.
    pub fn div_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(s)?;
        let sv = self.scalar_value(s)?;
        if sv == 0.0 {
            return Err(Error::Domain {
                op: "div_scalar_node",
                msg: "zero divisor".to_string(),
            });
        }
        let data = self.nodes[a].data.iter().map(|x| x / sv).collect();
        let rg = self.requires(a) || self.requires(s);
        Ok(self.push(Op::DivScalar(a, s), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], data, rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.exp()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "exp" });
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Exp(a), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if self.nodes[a].data.iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                msg: "input must be strictly positive".to_string(),
            });
        }
        let data = self.nodes[a].data.iter().map(|x| x.ln()).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::Ln(a), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if self.nodes[a].data.iter().any(|&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: "input must be non-negative".to_string(),
            });
        }
        let data = self.nodes[a].data.iter().map(|x| x.sqrt()).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::Sqrt(a), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let data = self.nodes[a].data.iter().map(|x| -x).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::Neg(a), self.nodes[a].shape.clone(), data, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let data = self.nodes[a].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::Relu(a), self.nodes[a].shape.clone(), data, rg))
    }

    /// Elementwise max(x, floor).
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.check(a)?;
        let data = self.nodes[a].data.iter().map(|x| x.max(floor)).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::ClampMin(a, floor), self.nodes[a].shape.clone(), data, rg))
    }

    fn last_axis(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let shape = &self.nodes[id].shape;
        let last = *shape.last().ok_or(Error::ShapeMismatch {
            op,
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if last == 0 {
            return Err(Error::Domain {
                op,
                msg: "empty last axis".to_string(),
            });
        }
        Ok((self.nodes[id].data.len() / last, last))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (rows, cols) = self.last_axis("softmax", a)?;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a].data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[r * cols + j] = e;
                total += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= total;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Softmax(a), self.nodes[a].shape.clone(), data, rg))
    }

    /// Log-softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (rows, cols) = self.last_axis("log_softmax", a)?;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a].data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..cols {
                data[r * cols + j] = row[j] - lse;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::LogSoftmax(a), self.nodes[a].shape.clone(), data, rg))
    }

    /// Stable log(sum(exp(x))) of a vector.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let x = &self.nodes[a].data;
        if x.is_empty() {
            return Err(Error::Domain {
                op: "log_sum_exp",
                msg: "empty input".to_string(),
            });
        }
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = m + x.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let rg = self.requires(a);
        Ok(self.push(Op::LogSumExp(a), vec![], vec![v], rg))
    }

    /// Squared Euclidean distance between two equally shaped tensors.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sq_dist", a, b)?;
        let v = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::SqDist(a, b), vec![], vec![v], rg))
    }

    /// Squared distances from a vector to every row of a constant matrix.
    pub fn dists_to_rows(&mut self, x: NodeId, rows: Arc<Tensor>) -> Result<NodeId> {
        self.check(x)?;
        let d = self.nodes[x].data.len();
        if rows.shape().len() != 2 || rows.shape()[1] != d {
            return Err(Error::ShapeMismatch {
                op: "dists_to_rows",
                lhs: self.nodes[x].shape.clone(),
                rhs: rows.shape().to_vec(),
            });
        }
        let n = rows.shape()[0];
        let xd = &self.nodes[x].data;
        let mut data = vec![0.0; n];
        for (z, out) in data.iter_mut().enumerate() {
            let row = &rows.data()[z * d..(z + 1) * d];
            *out = xd
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let rg = self.requires(x);
        Ok(self.push(Op::DistsToRows { x, rows }, vec![n], data, rg))
    }

    /// All pairwise squared distances between the rows of a [b, d] matrix.
    pub fn pairwise_sq_dists(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = &self.nodes[a].shape;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sq_dists",
                lhs: shape.clone(),
                rhs: vec![],
            });
        }
        let (b, d) = (shape[0], shape[1]);
        let x = &self.nodes[a].data;
        let mut data = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let mut s = 0.0;
                for c in 0..d {
                    let diff = x[i * d + c] - x[j * d + c];
                    s += diff * diff;
                }
                data[i * b + j] = s;
                data[j * b + i] = s;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::PairwiseSqDist(a), vec![b, b], data, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.nodes[a].data.iter().sum();
        let rg = self.requires(a);
        Ok(self.push(Op::Sum(a), vec![], vec![v], rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let n = self.nodes[a].data.len();
        if n == 0 {
            return Err(Error::Domain {
                op: "mean",
                msg: "empty input".to_string(),
            });
        }
        let v = self.nodes[a].data.iter().sum::<f64>() / n as f64;
        let rg = self.requires(a);
        Ok(self.push(Op::Mean(a), vec![], vec![v], rg))
    }

    /// [r, c] -> [r], summing over the last axis.
    pub fn sum_last_axis(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (rows, cols) = self.last_axis("sum_last_axis", a)?;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = self.nodes[a].data[r * cols..(r + 1) * cols].iter().sum();
        }
        let rg = self.requires(a);
        Ok(self.push(Op::SumLastAxis(a), vec![rows], data, rg))
    }

    /// Sum of scalar nodes.
    pub fn sum_many(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("sum_many of no terms".to_string()));
        }
        let mut v = 0.0;
        let mut rg = false;
        for &t in terms {
            self.check(t)?;
            v += self.scalar_value(t)?;
            rg |= self.requires(t);
        }
        Ok(self.push(Op::SumMany(terms.to_vec()), vec![], vec![v], rg))
    }

    /// Row `i` along the leading axis: [r, rest..] -> [rest..].
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.check(a)?;
        let shape = &self.nodes[a].shape;
        let rows = *shape.first().ok_or(Error::ShapeMismatch {
            op: "row",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if i >= rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: i,
                size: rows,
            });
        }
        let stride = self.nodes[a].data.len() / rows;
        let data = self.nodes[a].data[i * stride..(i + 1) * stride].to_vec();
        let out_shape = shape[1..].to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::Row(a, i), out_shape, data, rg))
    }

    /// 1-D gather.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let n = self.nodes[a].data.len();
        if self.nodes[a].shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: self.nodes[a].shape.clone(),
                rhs: vec![],
            });
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "gather index",
                    index: i,
                    size: n,
                });
            }
            data.push(self.nodes[a].data[i]);
        }
        let rg = self.requires(a);
        Ok(self.push(
            Op::Gather(a, indices.to_vec()),
            vec![indices.len()],
            data,
            rg,
        ))
    }

    /// Gather rows along the leading axis; repeated rows accumulate gradient.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let shape = &self.nodes[a].shape;
        let rows = *shape.first().ok_or(Error::ShapeMismatch {
            op: "gather_rows",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let stride = if rows == 0 {
            0
        } else {
            self.nodes[a].data.len() / rows
        };
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows index",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(&self.nodes[a].data[i * stride..(i + 1) * stride]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let rg = self.requires(a);
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), out_shape, data, rg))
    }

    /// out[r] = a[r, idx[r]] for a [r, c] input and one index per row.
    pub fn pick_per_row(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let (rows, cols) = self.rows_cols("pick_per_row", a)?;
        if indices.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "pick_per_row wants {} indices, got {}",
                rows,
                indices.len()
            )));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            if i >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "pick_per_row index",
                    index: i,
                    size: cols,
                });
            }
            data.push(self.nodes[a].data[r * cols + i]);
        }
        let rg = self.requires(a);
        Ok(self.push(Op::PickPerRow(a, indices.to_vec()), vec![rows], data, rg))
    }

    /// Single element of a vector, as a scalar node.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.check(a)?;
        let n = self.nodes[a].data.len();
        if self.nodes[a].shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "index",
                lhs: self.nodes[a].shape.clone(),
                rhs: vec![],
            });
        }
        if i >= n {
            return Err(Error::IndexOutOfRange {
                what: "index",
                index: i,
                size: n,
            });
        }
        let v = self.nodes[a].data[i];
        let rg = self.requires(a);
        Ok(self.push(Op::Index(a, i), vec![], vec![v], rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(a)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a].data.clone();
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape(a), shape, data, rg))
    }

    /// 3x3 same-padding patches of a [b, h, w, c] input, as [b*h*w, 9c] rows
    /// ordered (dy, dx, channel). Out-of-image taps read zero.
    pub fn im2col3x3(&mut self, input: NodeId, b: usize, h: usize, w: usize, c: usize) -> Result<NodeId> {
        self.check(input)?;
        if self.nodes[input].data.len() != b * h * w * c {
            return Err(Error::ShapeMismatch {
                op: "im2col3x3",
                lhs: self.nodes[input].shape.clone(),
                rhs: vec![b, h, w, c],
            });
        }
        let x = &self.nodes[input].data;
        let mut data = vec![0.0; b * h * w * 9 * c];
        let row_len = 9 * c;
        for bi in 0..b {
            for y in 0..h {
                for xq in 0..w {
                    let out_row = (bi * h + y) * w + xq;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xq as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                            let dst = out_row * row_len + (ky * 3 + kx) * c;
                            data[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(
            Op::Im2Col { input, b, h, w, c },
            vec![b * h * w, row_len],
            data,
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 on a [b, h, w, c] input (h, w even).
    pub fn max_pool2(&mut self, input: NodeId, b: usize, h: usize, w: usize, c: usize) -> Result<NodeId> {
        self.check(input)?;
        if self.nodes[input].data.len() != b * h * w * c || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2",
                lhs: self.nodes[input].shape.clone(),
                rhs: vec![b, h, w, c],
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = &self.nodes[input].data;
        let mut data = vec![0.0; b * oh * ow * c];
        let mut argmax = vec![0usize; b * oh * ow * c];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let src =
                                    ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if x[src] > best {
                                    best = x[src];
                                    best_idx = src;
                                }
                            }
                        }
                        let dst = ((bi * oh + oy) * ow + ox) * c + ch;
                        data[dst] = best;
                        argmax[dst] = best_idx;
                    }
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(Op::MaxPool2 { input, argmax }, vec![b, oh, ow, c], data, rg))
    }

    /// Reverse pass from a scalar node. Afterwards every node created with
    /// `requires_grad` holds d(loss)/d(node); nodes the loss never touched
    /// hold zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.nodes[loss].shape.clone(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss].requires_grad {
            grads[loss] = Some(vec![1.0]);
            self.reverse_walk(loss, &mut grads);
        }
        for (i, n) in self.nodes.iter_mut().enumerate() {
            if n.requires_grad {
                n.grad = Some(
                    grads[i]
                        .take()
                        .unwrap_or_else(|| vec![0.0; n.data.len()]),
                );
            }
        }
        Ok(())
    }

    fn reverse_walk(&self, loss: NodeId, grads: &mut Vec<Option<Vec<f64>>>) {
        let nodes = &self.nodes;
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, target: NodeId| -> bool {
            if !nodes[target].requires_grad {
                return false;
            }
            if grads[target].is_none() {
                grads[target] = Some(vec![0.0; nodes[target].data.len()]);
            }
            true
        };
        for id in (0..=loss).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if acc(grads, *a) {
                        add_scaled(grads[*a].as_mut().unwrap(), &g, 1.0);
                    }
                    if acc(grads, *b) {
                        add_scaled(grads[*b].as_mut().unwrap(), &g, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    if acc(grads, *a) {
                        add_scaled(grads[*a].as_mut().unwrap(), &g, 1.0);
                    }
                    if acc(grads, *b) {
                        add_scaled(grads[*b].as_mut().unwrap(), &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    if acc(grads, *a) {
                        let buf = grads[*a].take().unwrap();
                        let mut buf = buf;
                        for (i, d) in buf.iter_mut().enumerate() {
                            *d += g[i] * nodes[*b].data[i];
                        }
                        grads[*a] = Some(buf);
                    }
                    if acc(grads, *b) {
                        let mut buf = grads[*b].take().unwrap();
                        for (i, d) in buf.iter_mut().enumerate() {
                            *d += g[i] * nodes[*a].data[i];
                        }
                        grads[*b] = Some(buf);
                    }
                }
                Op::AddScalar(a) => {
                    if acc(grads, *a) {
                        add_scaled(grads[*a].as_mut().unwrap(), &g, 1.0);
                    }
                }
                Op::MulScalar(a, s) => {
                    if acc(grads, *a) {
                        add_scaled(grads[*a].as_mut().unwrap(), &g, *s);
                    }
                }
                Op::AddRows(m, v) => {
                    let cols = nodes[*v].data.len();
                    if acc(grads, *m) {
                        add_scaled(grads[*m].as_mut().unwrap(), &g, 1.0);
                    }
                    if acc(grads, *v) {
                        let buf = grads[*v].as_mut().unwrap();
                        for (i, gi) in g.iter().enumerate() {
                            buf[i % cols] += gi;
                        }
                    }
                }
                Op::DivRows(m, v) => {
                    let rows = nodes[*v].data.len();
                    let cols = nodes[*m].data.len() / rows;
                    if acc(grads, *m) {
                        let buf = grads[*m].as_mut().unwrap();
                        for r in 0..rows {
                            let d = nodes[*v].data[r];
                            for c in 0..cols {
                                buf[r * cols + c] += g[r * cols + c] / d;
                            }
                        }
                    }
                    if acc(grads, *v) {
                        let mut buf = grads[*v].take().unwrap();
                        for r in 0..rows {
                            let d = nodes[*v].data[r];
                            let mut s = 0.0;
                            for c in 0..cols {
                                s += g[r * cols + c] * nodes[*m].data[r * cols + c];
                            }
                            buf[r] -= s / (d * d);
                        }
                        grads[*v] = Some(buf);
                    }
                }
                Op::DivScalar(a, s) => {
                    let sv = nodes[*s].data[0];
                    if acc(grads, *a) {
                        add_scaled(grads[*a].as_mut().unwrap(), &g, 1.0 / sv);
                    }
                    if acc(grads, *s) {
                        let dot: f64 = g
                            .iter()
                            .zip(&nodes[*a].data)
                            .map(|(gi, ai)| gi * ai)
                            .sum();
                        grads[*s].as_mut().unwrap()[0] -= dot / (sv * sv);
                    }
                }
                Op::MatMul(a, b) => {
                    let m = nodes[*a].shape[0];
                    let k = nodes[*a].shape[1];
                    let n = nodes[*b].shape[1];
                    if acc(grads, *a) {
                        let mut buf = grads[*a].take().unwrap();
                        let bd = &nodes[*b].data;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bd[p * n + j];
                                }
                                buf[i * k + p] += s;
                            }
                        }
                        grads[*a] = Some(buf);
                    }
                    if acc(grads, *b) {
                        let mut buf = grads[*b].take().unwrap();
                        let ad = &nodes[*a].data;
                        for i in 0..m {
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    buf[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                        grads[*b] = Some(buf);
                    }
                }
                Op::Exp(a) => {
                    if acc(grads, *a) {
                        let buf = grads[*a].as_mut().unwrap();
                        for (i, gi) in g.iter().enumerate() {
                            buf[i] += gi * nodes[id].data[i];
                        }
                    }
                }
                Op::Ln(a) => {
                    if acc(grads, *a) {
                        let buf = grads[*a].as_mut().unwrap();
                        for (i, gi) in g.iter().enumerate() {
                            buf[i] += gi / nodes[*a].data[i];
                        }
                    }
                }
                Op::Sqrt(a) => {
                    if acc(grads, *a) {
                        let buf = grads[*a].as_mut().unwrap();
                        for (i, gi) in g.iter().enumerate() {
                            buf[i] += gi / (2.0 * nodes[id].data[i]);
                        }
                    }
                }
                Op::Neg(a) => {
                    if acc(grads, *a) {
                        add_scaled(grads[*a].as_mut().unwrap(), &g, -1.0);
                    }
                }
                Op::Relu(a) => {
                    if acc(grads, *a) {
                        let buf = grads[*a].as_mut().unwrap();
                        for (i, gi) in g.iter().enumerate() {
                            if nodes[*a].data[i] > 0.0 {
                                buf[i] += gi;
                            }
                        }
                    }
                }
                Op::ClampMin(a, floor) => {
                    if acc(grads, *a) {
                        let buf = grads[*a].as_mut().unwrap();
                        for (i, gi) in g.iter().enumerate() {
                            if nodes[*a].data[i] > *floor {
                                buf[i] += gi;
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    if acc(grads, *a) {
                        let cols = *nodes[id].shape.last().unwrap();
                        let rows = nodes[id].data.len() / cols;
                        let buf = grads[*a].as_mut().unwrap();
                        for r in 0..rows {
                            let s = &nodes[id].data[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                            for j in 0..cols {
                                buf[r * cols + j] += s[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    if acc(grads, *a) {
                        let cols = *nodes[id].shape.last().unwrap();
                        let rows = nodes[id].data.len() / cols;
                        let buf = grads[*a].as_mut().unwrap();
                        for r in 0..rows {
                            let out = &nodes[id].data[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..cols {
                                buf[r * cols + j] += gr[j] - out[j].exp() * gsum;
                            }
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    if acc(grads, *a) {
                        let out = nodes[id].data[0];
                        let buf = grads[*a].as_mut().unwrap();
                        for (i, xi) in nodes[*a].data.iter().enumerate() {
                            buf[i] += g[0] * (xi - out).exp();
                        }
                    }
                }
                Op::SqDist(a, b) => {
                    let t = 2.0 * g[0];
                    if acc(grads, *a) {
                        let buf = grads[*a].as_mut().unwrap();
                        for (i, d) in buf.iter_mut().enumerate() {
                            *d += t * (nodes[*a].data[i] - nodes[*b].data[i]);
                        }
                    }
                    if acc(grads, *b) {
                        let buf = grads[*b].as_mut().unwrap();
                        for (i, d) in buf.iter_mut().enumerate() {
                            *d -= t * (nodes[*a].data[i] - nodes[*b].data[i]);
                        }
                    }
                }
                Op::DistsToRows { x, rows } => {
                    if acc(grads, *x) {
                        let d = nodes[*x].data.len();
                        let buf = grads[*x].as_mut().unwrap();
                        for (z, gz) in g.iter().enumerate() {
                            if *gz == 0.0 {
                                continue;
                            }
                            let t = 2.0 * gz;
                            let row = &rows.data()[z * d..(z + 1) * d];
                            for c in 0..d {
                                buf[c] += t * (nodes[*x].data[c] - row[c]);
                            }
                        }
                    }
                }
                Op::PairwiseSqDist(a) => {
                    if acc(grads, *a) {
                        let b = nodes[*a].shape[0];
                        let d = nodes[*a].shape[1];
                        let x = &nodes[*a].data;
                        let buf = grads[*a].as_mut().unwrap();
                        for i in 0..b {
                            for j in 0..b {
                                let gij = g[i * b + j];
                                if gij == 0.0 || i == j {
                                    continue;
                                }
                                let t = 2.0 * gij;
                                for c in 0..d {
                                    let diff = x[i * d + c] - x[j * d + c];
                                    buf[i * d + c] += t * diff;
                                    buf[j * d + c] -= t * diff;
                                }
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if acc(grads, *a) {
                        for d in grads[*a].as_mut().unwrap() {
                            *d += g[0];
                        }
                    }
                }
                Op::Mean(a) => {
                    if acc(grads, *a) {
                        let n = nodes[*a].data.len() as f64;
                        for d in grads[*a].as_mut().unwrap() {
                            *d += g[0] / n;
                        }
                    }
                }
                Op::SumLastAxis(a) => {
                    if acc(grads, *a) {
                        let rows = nodes[id].data.len();
                        let cols = nodes[*a].data.len() / rows;
                        let buf = grads[*a].as_mut().unwrap();
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[r * cols + c] += g[r];
                            }
                        }
                    }
                }
                Op::SumMany(terms) => {
                    for &t in terms {
                        if acc(grads, t) {
                            grads[t].as_mut().unwrap()[0] += g[0];
                        }
                    }
                }
                Op::Row(a, i) => {
                    if acc(grads, *a) {
                        let stride = g.len();
                        let buf = grads[*a].as_mut().unwrap();
                        add_scaled(&mut buf[i * stride..(i + 1) * stride], &g, 1.0);
                    }
                }
                Op::Gather(a, indices) => {
                    if acc(grads, *a) {
                        let buf = grads[*a].as_mut().unwrap();
                        for (p, &i) in indices.iter().enumerate() {
                            buf[i] += g[p];
                        }
                    }
                }
                Op::GatherRows(a, indices) => {
                    if acc(grads, *a) {
                        let stride = if indices.is_empty() {
                            0
                        } else {
                            g.len() / indices.len()
                        };
                        let buf = grads[*a].as_mut().unwrap();
                        for (p, &i) in indices.iter().enumerate() {
                            add_scaled(
                                &mut buf[i * stride..(i + 1) * stride],
                                &g[p * stride..(p + 1) * stride],
                                1.0,
                            );
                        }
                    }
                }
                Op::PickPerRow(a, indices) => {
                    if acc(grads, *a) {
                        let cols = nodes[*a].data.len() / indices.len();
                        let buf = grads[*a].as_mut().unwrap();
                        for (r, &i) in indices.iter().enumerate() {
                            buf[r * cols + i] += g[r];
                        }
                    }
                }
                Op::Index(a, i) => {
                    if acc(grads, *a) {
                        grads[*a].as_mut().unwrap()[*i] += g[0];
                    }
                }
                Op::Reshape(a) => {
                    if acc(grads, *a) {
                        add_scaled(grads[*a].as_mut().unwrap(), &g, 1.0);
                    }
                }
                Op::Im2Col { input, b, h, w, c } => {
                    if acc(grads, *input) {
                        let row_len = 9 * c;
                        let buf = grads[*input].as_mut().unwrap();
                        for bi in 0..*b {
                            for y in 0..*h {
                                for xq in 0..*w {
                                    let out_row = (bi * h + y) * w + xq;
                                    for ky in 0..3usize {
                                        let sy = y as isize + ky as isize - 1;
                                        if sy < 0 || sy >= *h as isize {
                                            continue;
                                        }
                                        for kx in 0..3usize {
                                            let sx = xq as isize + kx as isize - 1;
                                            if sx < 0 || sx >= *w as isize {
                                                continue;
                                            }
                                            let src =
                                                ((bi * h + sy as usize) * w + sx as usize) * c;
                                            let dst = out_row * row_len + (ky * 3 + kx) * c;
                                            add_scaled(
                                                &mut buf[src..src + c],
                                                &g[dst..dst + c],
                                                1.0,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2 { input, argmax, .. } => {
                    if acc(grads, *input) {
                        let buf = grads[*input].as_mut().unwrap();
                        for (o, &src) in argmax.iter().enumerate() {
                            buf[src] += g[o];
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
    }
}
