//! Dense 2-D tensors with reverse-mode differentiation on an explicit tape.
//!
//! Every value is a row-major matrix; scalars are `1 × 1`. Operations append
//! a node to the [`Tape`] and return a [`Tensor`] handle. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into every leaf that
//! requires them.

pub mod gradcheck;
mod kernels;
mod params;

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

use crate::mesh::SparseMatrix;

pub use params::{ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: (usize, usize), to: (usize, usize) },
    #[error("rows {start}..{end} out of range for {rows} rows")]
    SliceRows { start: usize, end: usize, rows: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("{groups} groups do not divide {channels} channels")]
    GroupCount { channels: usize, groups: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(pub(crate) usize);

/// Which entries share GroupNorm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupNormStats {
    /// One mean/variance per channel group over all nodes.
    AcrossNodes,
    /// One mean/variance per (node, channel group).
    PerNode,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    SoftmaxRows(Tensor),
    MaskedSoftmaxRows(Tensor),
    ConcatCols(Vec<Tensor>),
    SparseMatMul(Arc<SparseMatrix>, Tensor),
    Sum(Tensor),
    Mean(Tensor),
    L1Norm(Tensor),
    L2Norm(Tensor),
    Reshape(Tensor),
    SliceRows(Tensor, usize),
    Transpose(Tensor),
    OuterSum(Tensor, Tensor),
    GroupNorm { x: Tensor, groups: usize, stats: GroupNormStats, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of operations. Parents always precede their children.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Tensor {
        self.nodes.push(Node { value, op, needs_grad, requires_grad: false, param: None });
        self.grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    fn ng(&self, t: Tensor) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Tensor {
        let t = self.push(value, Op::Leaf, requires_grad);
        self.nodes[t.0].requires_grad = requires_grad;
        t
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Tensor {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Tensor {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Records the current value of a stored parameter as a gradient leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        let t = self.leaf(store.value(id).clone(), true);
        self.nodes[t.0].param = Some(id);
        t
    }

    pub fn value(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.dim()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Scalar value of a `1 × 1` tensor.
    pub fn item(&self, t: Tensor) -> f64 {
        let v = &self.nodes[t.0].value;
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, t: Tensor) -> Option<&Array2<f64>> {
        self.grads[t.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.nodes
            .iter()
            .zip(&self.grads)
            .filter_map(|(n, g)| Some((n.param?, g.as_ref()?)))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let v = kernels::matmul(self.value(a).view(), self.value(b).view());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `x + 1·row` for a `1 × c` row vector; the only broadcast supported.
    pub fn add_row(&mut self, x: Tensor, row: Tensor) -> Result<Tensor> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.0 != 1 || sr.1 != sx.1 {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: sx, rhs: sr });
        }
        let v = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(v, Op::AddRow(x, row), ng))
    }

    /// Scales every column of `x` by the matching entry of a `1 × c` row.
    pub fn mul_row(&mut self, x: Tensor, row: Tensor) -> Result<Tensor> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.0 != 1 || sr.1 != sx.1 {
            return Err(TensorError::ShapeMismatch { op: "mul_row", lhs: sx, rhs: sr });
        }
        let v = self.value(x) * self.value(row);
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(v, Op::MulRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Tensor, factor: f64) -> Tensor {
        let v = self.value(x) * factor;
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, factor), ng)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).mapv(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Tensor, slope: f64) -> Tensor {
        let v = self.value(x).mapv(|a| if a > 0.0 { a } else { slope * a });
        let ng = self.ng(x);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).mapv(|a| 1.0 / (1.0 + (-a).exp()));
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Tensor) -> Tensor {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            row.mapv_inplace(|a| (a - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|a| a / sum);
        }
        let ng = self.ng(x);
        self.push(v, Op::SoftmaxRows(x), ng)
    }

    /// Row softmax restricted to entries where `mask` is true; all other
    /// outputs are exactly zero. Rows without any allowed entry are zero.
    pub fn masked_softmax_rows(&mut self, x: Tensor, mask: &Array2<bool>) -> Result<Tensor> {
        let sx = self.shape(x);
        if mask.dim() != sx {
            return Err(TensorError::ShapeMismatch { op: "masked_softmax_rows", lhs: sx, rhs: mask.dim() });
        }
        let mut v = self.value(x).clone();
        for (mut row, mrow) in v.rows_mut().into_iter().zip(mask.rows()) {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |acc, (&a, _)| acc.max(a));
            let mut sum = 0.0;
            for (a, &m) in row.iter_mut().zip(mrow) {
                *a = if m { (*a - max).exp() } else { 0.0 };
                sum += *a;
            }
            if sum > 0.0 {
                row.mapv_inplace(|a| a / sum);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::MaskedSoftmaxRows(x), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `s · x` with a constant sparse `s`; no gradient flows into `s`.
    pub fn sparse_matmul(&mut self, s: &Arc<SparseMatrix>, x: Tensor) -> Result<Tensor> {
        let sx = self.shape(x);
        if s.cols() != sx.0 {
            return Err(TensorError::ShapeMismatch { op: "sparse_matmul", lhs: s.shape(), rhs: sx });
        }
        let v = s.mul_dense(self.value(x).view());
        let ng = self.ng(x);
        Ok(self.push(v, Op::SparseMatMul(Arc::clone(s), x), ng))
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let value = self.value(x);
        let v = Array2::from_elem((1, 1), value.sum() / value.len() as f64);
        let ng = self.ng(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, x: Tensor) -> Tensor {
        let v = Array2::from_elem((1, 1), self.value(x).iter().map(|a| a.abs()).sum());
        let ng = self.ng(x);
        self.push(v, Op::L1Norm(x), ng)
    }

    /// Frobenius norm.
    pub fn l2_norm(&mut self, x: Tensor) -> Tensor {
        let v = Array2::from_elem((1, 1), self.value(x).iter().map(|a| a * a).sum::<f64>().sqrt());
        let ng = self.ng(x);
        self.push(v, Op::L2Norm(x), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Tensor, shape: (usize, usize)) -> Result<Tensor> {
        let sx = self.shape(x);
        if sx.0 * sx.1 != shape.0 * shape.1 {
            return Err(TensorError::Reshape { from: sx, to: shape });
        }
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let v = Array2::from_shape_vec(shape, flat).expect("size checked");
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn slice_rows(&mut self, x: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let rows = self.shape(x).0;
        if start > end || end > rows {
            return Err(TensorError::SliceRows { start, end, rows });
        }
        let v = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceRows(x, start), ng))
    }

    pub fn transpose(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).t().as_standard_layout().into_owned();
        let ng = self.ng(x);
        self.push(v, Op::Transpose(x), ng)
    }

    /// `out[i][j] = col[i] + row[j]` for an `n × 1` column and `1 × m` row.
    pub fn outer_sum(&mut self, col: Tensor, row: Tensor) -> Result<Tensor> {
        let (sc, sr) = (self.shape(col), self.shape(row));
        if sc.1 != 1 || sr.0 != 1 {
            return Err(TensorError::ShapeMismatch { op: "outer_sum", lhs: sc, rhs: sr });
        }
        let (c, r) = (self.value(col), self.value(row));
        let v = Array2::from_shape_fn((sc.0, sr.1), |(i, j)| c[[i, 0]] + r[[0, j]]);
        let ng = self.ng(col) || self.ng(row);
        Ok(self.push(v, Op::OuterSum(col, row), ng))
    }

    /// Normalizes `x` (nodes × channels) to zero mean and unit variance within
    /// each channel group, without the affine part.
    pub fn group_norm(
        &mut self,
        x: Tensor,
        groups: usize,
        stats: GroupNormStats,
        eps: f64,
    ) -> Result<Tensor> {
        let (n, c) = self.shape(x);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::GroupCount { channels: c, groups });
        }
        let width = c / groups;
        let xv = self.value(x);
        let mut out = Array2::zeros((n, c));
        let mut inv_std = Vec::new();
        for (node_range, g) in group_blocks(n, groups, stats) {
            let block = xv.slice(s![node_range.clone(), g * width..(g + 1) * width]);
            let count = block.len() as f64;
            let mean = block.sum() / count;
            let var = block.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / count;
            let inv = 1.0 / (var + eps).sqrt();
            out.slice_mut(s![node_range, g * width..(g + 1) * width])
                .assign(&block.mapv(|a| (a - mean) * inv));
            inv_std.push(inv);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GroupNorm { x, groups, stats, inv_std }, ng))
    }

    /// Reverse pass from a scalar `loss`. Gradients of `requires_grad` leaves
    /// are added to whatever earlier calls left there.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(node, &g, &mut adj);
            if node.requires_grad {
                match &mut self.grads[i] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let mut send = |t: Tensor, grad: Array2<f64>| {
            if !nodes[t.0].needs_grad {
                return;
            }
            match &mut adj[t.0] {
                Some(acc) => *acc += &grad,
                slot => *slot = Some(grad),
            }
        };
        let val = |t: Tensor| &nodes[t.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].needs_grad {
                    send(*a, kernels::matmul_nt(g.view(), val(*b).view()));
                }
                if nodes[b.0].needs_grad {
                    send(*b, kernels::matmul_tn(val(*a).view(), g.view()));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g * val(*b));
                send(*b, g * val(*a));
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(x, row) => {
                send(*x, g * val(*row));
                send(*row, (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(x, f) => send(*x, g * *f),
            Op::Relu(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                send(*x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |d, &a| {
                    if a <= 0.0 {
                        *d *= slope
                    }
                });
                send(*x, d);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                send(*x, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::SoftmaxRows(x) | Op::MaskedSoftmaxRows(x) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                send(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.ncols();
                    if nodes[p.0].needs_grad {
                        send(p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::SparseMatMul(s, x) => send(*x, s.transpose_mul_dense(g.view())),
            Op::Sum(x) => send(*x, Array2::from_elem(val(*x).raw_dim(), g[[0, 0]])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                send(*x, Array2::from_elem(val(*x).raw_dim(), g[[0, 0]] / n));
            }
            Op::L1Norm(x) => {
                let s = g[[0, 0]];
                send(*x, val(*x).mapv(|a| if a > 0.0 { s } else if a < 0.0 { -s } else { 0.0 }));
            }
            Op::L2Norm(x) => {
                let norm = node.value[[0, 0]];
                let s = if norm > 0.0 { g[[0, 0]] / norm } else { 0.0 };
                send(*x, val(*x) * s);
            }
            Op::Reshape(x) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                send(*x, Array2::from_shape_vec(val(*x).raw_dim(), flat).unwrap());
            }
            Op::SliceRows(x, start) => {
                let mut d = Array2::zeros(val(*x).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                send(*x, d);
            }
            Op::Transpose(x) => send(*x, g.t().as_standard_layout().into_owned()),
            Op::OuterSum(col, row) => {
                send(*col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::GroupNorm { x, groups, stats, inv_std } => {
                let (n, c) = g.dim();
                let width = c / groups;
                let y = &node.value;
                let mut d = Array2::zeros((n, c));
                for ((node_range, grp), &inv) in group_blocks(n, *groups, *stats).zip(inv_std) {
                    let cols = grp * width..(grp + 1) * width;
                    let gb = g.slice(s![node_range.clone(), cols.clone()]);
                    let yb = y.slice(s![node_range.clone(), cols.clone()]);
                    let m = gb.len() as f64;
                    let mean_g = gb.sum() / m;
                    let mean_gy = (&gb * &yb).sum() / m;
                    let mut db = d.slice_mut(s![node_range, cols]);
                    ndarray::Zip::from(&mut db).and(&gb).and(&yb).for_each(|dv, &gv, &yv| {
                        *dv = inv * (gv - mean_g - yv * mean_gy);
                    });
                }
                send(*x, d);
            }
        }
    }
}

/// Enumerates `(node range, group index)` blocks sharing statistics.
fn group_blocks(
    n: usize,
    groups: usize,
    stats: GroupNormStats,
) -> Box<dyn Iterator<Item = (std::ops::Range<usize>, usize)>> {
    match stats {
        GroupNormStats::AcrossNodes => Box::new((0..groups).map(move |g| (0..n, g))),
        GroupNormStats::PerNode => {
            Box::new((0..n).flat_map(move |i| (0..groups).map(move |g| (i..i + 1, g))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_tensor_grad, GradTolerance};
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_matmul_and_ones_gradient() {
        let mut tape = Tape::new();
        let x = array![[1.0, -2.0], [3.0, 0.5], [0.0, 4.0]];
        let i3 = tape.constant(Array2::eye(3));
        let xt = tape.leaf(x.clone(), true);
        let y = tape.matmul(i3, xt).unwrap();
        assert_eq!(tape.value(y), &x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xt).unwrap(), &Array2::<f64>::ones((3, 2)));
    }

    #[test]
    fn relu_blocks_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[-1.0, 2.0]], true);
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut tape = Tape::new();
        let a = tape.constant(Array2::zeros((2, 3)));
        let b = tape.constant(Array2::zeros((2, 3)));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", lhs: (2, 3), rhs: (2, 3) });
        assert!(err.to_string().contains("matmul"));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]], true);
        let zero = tape.scale(x, 0.0);
        let loss = tape.sum(zero);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &array![[0.0, 0.0]]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let w = tape.leaf(random(&mut rng, 3, 2), true);
        let x = tape.constant(random(&mut rng, 4, 3));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(y);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        let once = tape.grad(w).unwrap().clone();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &(&once * 2.0));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, 6, 5) * 20.0);
        let y = tape.softmax_rows(x);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let mask = array![[true, false, true], [false, false, false]];
        let y = tape.masked_softmax_rows(x, &mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-15);
        assert_eq!(v.row(1).sum(), 0.0);
    }

    /// Builds a scalar loss exercising every op from a single input matrix.
    fn composite(tape: &mut Tape, w: Tensor, consts: &[Array2<f64>; 3]) -> Tensor {
        let x = tape.constant(consts[0].clone());
        let mask = consts[2].mapv(|m| m > 0.0);
        let h = tape.matmul(x, w).unwrap(); // 5x4
        let bias = tape.slice_rows(w, 0, 1).unwrap(); // 1x4
        let h = tape.add_row(h, bias).unwrap();
        let h = tape.mul_row(h, bias).unwrap();
        let t = tape.transpose(h); // 4x5
        let sq = tape.matmul(h, t).unwrap(); // 5x5
        let sm = tape.softmax_rows(sq);
        let ms = tape.masked_softmax_rows(sq, &mask).unwrap();
        let both = tape.add(sm, ms).unwrap();
        let s = Arc::new(SparseMatrix::from_dense(consts[1].view()));
        let sp = tape.sparse_matmul(&s, both).unwrap();
        let lr = tape.leaky_relu(sp, 0.2);
        let sg = tape.sigmoid(h);
        let cat = tape.concat_cols(&[lr, sg]).unwrap(); // 5x9
        let gn = tape.group_norm(cat, 3, GroupNormStats::AcrossNodes, 1e-5).unwrap();
        let gp = tape.group_norm(cat, 1, GroupNormStats::PerNode, 1e-5).unwrap();
        let prod = tape.mul(gn, gp).unwrap();
        let r = tape.reshape(prod, (9, 5)).unwrap();
        let col = tape.slice_rows(r, 0, 5).unwrap();
        let c1 = tape.slice_rows(t, 0, 1).unwrap(); // 1x5
        let c0 = tape.transpose(c1); // 5x1
        let os = tape.outer_sum(c0, c1).unwrap();
        let d = tape.sub(col, os).unwrap();
        let relu = tape.relu(d);
        let a = tape.l1_norm(relu);
        let b = tape.l2_norm(d);
        let c = tape.mean(d);
        let ab = tape.add(a, b).unwrap();
        let abc = tape.mul(ab, c).unwrap();
        tape.scale(abc, 0.5)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w0 = random(&mut rng, 5, 4);
            let consts = [
                random(&mut rng, 5, 5),
                random(&mut rng, 5, 5).mapv(|v| if v.abs() > 0.4 { v } else { 0.0 }),
                random(&mut rng, 5, 5).mapv(|v| if v > -0.5 { 1.0 } else { 0.0 }),
            ];
            let report = check_tensor_grad(&w0, 1e-5, |tape, w| composite(tape, w, &consts));
            assert!(report.passes(GradTolerance::default()), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn relu_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(&mut rng, 3, 3);
        let report = check_tensor_grad(&x0, 1e-5, |tape, x| {
            let r = tape.relu(x);
            tape.sum(r)
        });
        assert!(report.passes(GradTolerance::default()), "{report:?}");
    }

    #[test]
    fn matmul_weight_gradient_random_5x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = random(&mut rng, 5, 4);
        let x = random(&mut rng, 3, 5);
        let report = check_tensor_grad(&w0, 1e-5, |tape, w| {
            let xt = tape.constant(x.clone());
            let y = tape.matmul(xt, w).unwrap();
            let s = tape.sigmoid(y);
            let sq = tape.mul(s, s).unwrap();
            tape.sum(sq)
        });
        assert!(report.max_relative() < 1e-4, "{report:?}");
    }

    #[test]
    fn identical_inputs_give_identical_bits() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let w0 = random(&mut rng, 5, 4);
            let consts = [random(&mut rng, 5, 5), random(&mut rng, 5, 5), Array2::ones((5, 5))];
            let mut tape = Tape::new();
            let w = tape.leaf(w0, true);
            let loss = composite(&mut tape, w, &consts);
            tape.backward(loss).unwrap();
            (tape.item(loss).to_bits(), tape.grad(w).unwrap().mapv(f64::to_bits))
        };
        assert_eq!(run(), run());
    }
}
