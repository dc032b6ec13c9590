//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and a reference
//! to its inputs; nodes are therefore in topological order by construction.
//! [`Graph::backward`] walks the tape once in reverse.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::motion::{self, Skeleton, FRAME_DIM, JOINT_COUNT};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    SigmoidCols(Var, usize, usize),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    RepeatCols(Var, usize),
    DiffRows(Var),
    Sum(Var),
    SumSquares(Var),
    Conv1d(Var, Var, usize),
    Fk(Var, Arc<Skeleton>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn expect_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("{what}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (kb, n) = self.expect_matrix(b, "matmul rhs")?;
        if k != kb {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let mut shape = self.shape(a).to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_matrix(a, "matmul_t lhs")?;
        let (n, kb) = self.expect_matrix(b, "matmul_t rhs")?;
        if k != kb {
            return Err(mismatch("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            &mut out,
            false,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulTransB(a, b), ng))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (_, n) = self.rc(x);
        if self.value(r).len() != n {
            return Err(mismatch("row broadcast", self.shape(x), self.shape(r)));
        }
        let rv = self.value(r).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(rv) {
                if mul {
                    *o *= b
                } else {
                    *o += b
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, r]);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    /// Adds a length-`n` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast(x, bias, false)
    }

    /// Multiplies every row elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_broadcast(x, gain, true)
    }

    fn zip(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("elementwise", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// Logistic sigmoid applied to columns `start..end` only.
    pub fn sigmoid_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (_, n) = self.rc(x);
        if start > end || end > n {
            return Err(Error::ShapeMismatch(format!("sigmoid columns {start}..{end} of {n}")));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for v in &mut row[start..end] {
                *v = sigmoid(*v);
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SigmoidCols(x, start, end), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, n) = self.rc(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), Op::SoftmaxRows(x), ng)
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        }
        let n = self.rc(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != n {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        if start > end || end > m {
            return Err(Error::ShapeMismatch(format!("row slice {start}..{end} of {m}")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(end - start, n, out)?, Op::SliceRows(x, start), ng))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        }
        let m = self.rc(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rc(p).1).collect();
        for &p in parts {
            if self.rc(p).0 != m {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        if start > end || end > n {
            return Err(Error::ShapeMismatch(format!("column slice {start}..{end} of {n}")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&v.row(r)[start..end]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(m, end - start, out)?, Op::SliceCols(x, start), ng))
    }

    /// Column means, shape `[1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.rc(x);
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(1, n, out).unwrap(), Op::MeanRows(x), ng)
    }

    /// Repeats each column `times` times in place: `[a, b] -> [a, a, b, b]`.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Var {
        let (m, n) = self.rc(x);
        let mut out = Vec::with_capacity(m * n * times);
        for row in self.value(x).data().chunks_exact(n) {
            for v in row {
                for _ in 0..times {
                    out.push(*v);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(m, n * times, out).unwrap(), Op::RepeatCols(x, times), ng)
    }

    /// Consecutive row differences `x[i+1] - x[i]`.
    pub fn diff_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rc(x);
        if m < 2 {
            return Err(Error::SequenceTooShort { needed: 2, got: m });
        }
        let d = self.value(x).data();
        let out: Vec<f64> = (0..(m - 1) * n).map(|i| d[i + n] - d[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(m - 1, n, out)?, Op::DiffRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Temporal convolution with "same" zero padding.
    /// `x: [N, C_in]`, `w: [k, C_in, C_out]` with odd `k`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (len, c_in) = self.expect_matrix(x, "conv1d input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in || ws[0] % 2 == 0 {
            return Err(mismatch("conv1d", self.shape(x), &ws));
        }
        let (k, c_out) = (ws[0], ws[2]);
        let cols = im2col(self.value(x).data(), len, c_in, k);
        let mut out = vec![0.0; len * c_out];
        gemm(
            len,
            k * c_in,
            c_out,
            &cols,
            (k * c_in) as isize,
            1,
            self.value(w).data(),
            c_out as isize,
            1,
            &mut out,
            false,
        );
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::matrix(len, c_out, out)?, Op::Conv1d(x, w, k), ng))
    }

    /// Forward kinematics of packed frames `[N, 151]` to joint positions `[N, 72]`.
    pub fn forward_kinematics(&mut self, x: Var, skeleton: Arc<Skeleton>) -> Result<Var> {
        let (m, n) = self.expect_matrix(x, "fk input")?;
        if n != FRAME_DIM {
            return Err(Error::ShapeMismatch(format!("fk expects {FRAME_DIM} columns, got {n}")));
        }
        let mut out = Vec::with_capacity(m * JOINT_COUNT * 3);
        for r in 0..m {
            let pose = motion::forward_kinematics_packed(&skeleton, self.value(x).row(r))?;
            for p in pose.positions.iter() {
                out.extend_from_slice(p);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(m, JOINT_COUNT * 3, out)?, Op::Fk(x, skeleton), ng))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Returns a mutable gradient buffer for `v`, or None if not needed.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();
        let rc = |v: Var| (nodes[v.0].value.rows(), nodes[v.0].value.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rc(*a);
                let n = rc(*b).1;
                if let Some(ga) = acc!(*a) {
                    gemm(m, n, k, dy, n as isize, 1, val(*b), 1, n as isize, ga, true);
                }
                if let Some(gb) = acc!(*b) {
                    gemm(k, m, n, val(*a), 1, k as isize, dy, n as isize, 1, gb, true);
                }
            }
            Op::MatMulTransB(a, b) => {
                let (m, k) = rc(*a);
                let n = rc(*b).0;
                if let Some(ga) = acc!(*a) {
                    gemm(m, n, k, dy, n as isize, 1, val(*b), k as isize, 1, ga, true);
                }
                if let Some(gb) = acc!(*b) {
                    gemm(n, m, k, dy, 1, n as isize, val(*a), k as isize, 1, gb, true);
                }
            }
            Op::AddRow(x, r) => {
                let n = rc(*x).1;
                if let Some(gx) = acc!(*x) {
                    add_into(gx, dy);
                }
                if let Some(gr) = acc!(*r) {
                    for row in dy.chunks_exact(n) {
                        add_into(gr, row);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let n = rc(*x).1;
                let rv = val(*r);
                if let Some(gx) = acc!(*x) {
                    for (grow, drow) in gx.chunks_exact_mut(n).zip(dy.chunks_exact(n)) {
                        for j in 0..n {
                            grow[j] += drow[j] * rv[j];
                        }
                    }
                }
                if let Some(gr) = acc!(*r) {
                    for (xrow, drow) in val(*x).chunks_exact(n).zip(dy.chunks_exact(n)) {
                        for j in 0..n {
                            gr[j] += drow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, dy);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, dy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, dy);
                }
                if let Some(gb) = acc!(*b) {
                    for (g, d) in gb.iter_mut().zip(dy) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(val(*b)) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((g, d), x) in gb.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc!(*x) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d * s;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, dy);
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((g, d), v) in gx.iter_mut().zip(dy).zip(val(*x)) {
                        *g += d * gelu_grad(*v);
                    }
                }
            }
            Op::SigmoidCols(x, start, end) => {
                let n = rc(*x).1;
                let out = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for i in 0..gx.len() {
                        let c = i % n;
                        gx[i] += if c >= *start && c < *end {
                            dy[i] * out[i] * (1.0 - out[i])
                        } else {
                            dy[i]
                        };
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = rc(*x).1;
                let out = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for ((grow, drow), yrow) in gx.chunks_exact_mut(n).zip(dy.chunks_exact(n)).zip(out.chunks_exact(n))
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for j in 0..n {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = acc!(p) {
                        add_into(gp, &dy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let n = rc(*x).1;
                if let Some(gx) = acc!(*x) {
                    add_into(&mut gx[start * n..start * n + dy.len()], dy);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = rc(p).1;
                    if let Some(gp) = acc!(p) {
                        for (grow, drow) in gp.chunks_exact_mut(w).zip(dy.chunks_exact(total)) {
                            add_into(grow, &drow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let n = rc(*x).1;
                let w = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for (grow, drow) in gx.chunks_exact_mut(n).zip(dy.chunks_exact(w)) {
                        add_into(&mut grow[*start..start + w], drow);
                    }
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = rc(*x);
                if let Some(gx) = acc!(*x) {
                    for grow in gx.chunks_exact_mut(n) {
                        for j in 0..n {
                            grow[j] += dy[j] / m as f64;
                        }
                    }
                }
            }
            Op::RepeatCols(x, times) => {
                if let Some(gx) = acc!(*x) {
                    for (i, g) in gx.iter_mut().enumerate() {
                        *g += dy[i * times..(i + 1) * times].iter().sum::<f64>();
                    }
                }
            }
            Op::DiffRows(x) => {
                let n = rc(*x).1;
                if let Some(gx) = acc!(*x) {
                    for (i, d) in dy.iter().enumerate() {
                        gx[i + n] += d;
                        gx[i] -= d;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    for g in gx.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::SumSquares(x) => {
                if let Some(gx) = acc!(*x) {
                    for (g, v) in gx.iter_mut().zip(val(*x)) {
                        *g += 2.0 * v * dy[0];
                    }
                }
            }
            Op::Conv1d(x, w, k) => {
                let (len, c_in) = rc(*x);
                let c_out = node.value.cols();
                let kc = k * c_in;
                if let Some(gw) = acc!(*w) {
                    let cols = im2col(val(*x), len, c_in, *k);
                    gemm(kc, len, c_out, &cols, 1, kc as isize, dy, c_out as isize, 1, gw, true);
                }
                if let Some(gx) = acc!(*x) {
                    let mut dcols = vec![0.0; len * kc];
                    gemm(
                        len,
                        c_out,
                        kc,
                        dy,
                        c_out as isize,
                        1,
                        val(*w),
                        1,
                        c_out as isize,
                        &mut dcols,
                        false,
                    );
                    col2im_add(&dcols, len, c_in, *k, gx);
                }
            }
            Op::Fk(x, skeleton) => {
                if let Some(gx) = acc!(*x) {
                    let xv = val(*x);
                    let per = JOINT_COUNT * 3;
                    for r in 0..dy.len() / per {
                        motion::fk_vjp_packed(
                            skeleton,
                            &xv[r * FRAME_DIM..(r + 1) * FRAME_DIM],
                            &dy[r * per..(r + 1) * per],
                            &mut gx[r * FRAME_DIM..(r + 1) * FRAME_DIM],
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Rows of the unfolded input: `cols[i][d*C + c] = x[i + d - pad][c]`.
fn im2col(x: &[f64], len: usize, c_in: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let kc = k * c_in;
    let mut cols = vec![0.0; len * kc];
    for i in 0..len {
        for d in 0..k {
            let src = i + d;
            if src < pad || src - pad >= len {
                continue;
            }
            let s = src - pad;
            cols[i * kc + d * c_in..i * kc + (d + 1) * c_in].copy_from_slice(&x[s * c_in..(s + 1) * c_in]);
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], len: usize, c_in: usize, k: usize, gx: &mut [f64]) {
    let pad = (k - 1) / 2;
    let kc = k * c_in;
    for i in 0..len {
        for d in 0..k {
            let src = i + d;
            if src < pad || src - pad >= len {
                continue;
            }
            let s = src - pad;
            add_into(
                &mut gx[s * c_in..(s + 1) * c_in],
                &dcols[i * kc + d * c_in..i * kc + (d + 1) * c_in],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let s = g.sum_squares(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![3]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(vec![1, 3], 2.0));
        let c = g.constant(Tensor::full(vec![1, 3], 5.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0; 3]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2, 3], vec![1.0, 2.0, 3.0, -100.0, 0.0, 100.0]));
        let y = g.softmax_rows(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(vec![3]));
        assert!(g.add(a, c).is_err());
        let w = g.constant(Tensor::zeros(vec![2, 3, 3]));
        assert!(g.conv1d(a, w).is_err());
    }
}
