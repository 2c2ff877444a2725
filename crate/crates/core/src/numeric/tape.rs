//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into the [`ParamStore`] entries that were registered with
//! [`Tape::param`]. Constants never receive gradients, which is how target
//! network weights are kept out of the update.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::matrix::{matmul_a_bt_into, matmul_at_b_into, matmul_into};
use super::{Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the output value `y = apply(x)`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Compressed sparse row matrix used as a constant left operand.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_dense(m: &Matrix) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        SparseMatrix {
            rows: m.rows(),
            cols: m.cols(),
            indptr,
            indices,
            values,
        }
    }

    /// Block-diagonal stack of square blocks.
    pub fn block_diagonal(blocks: &[Matrix]) -> Self {
        let n: usize = blocks.iter().map(Matrix::rows).sum();
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut offset = 0;
        for b in blocks {
            for i in 0..b.rows() {
                for (j, &v) in b.row(i).iter().enumerate() {
                    if v != 0.0 {
                        indices.push(offset + j);
                        values.push(v);
                    }
                }
                indptr.push(indices.len());
            }
            offset += b.cols();
        }
        SparseMatrix {
            rows: n,
            cols: offset,
            indptr,
            indices,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }
}

/// Flattened edge list for multi-head neighbor attention.
#[derive(Clone, Debug)]
pub struct NeighborLists {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl NeighborLists {
    pub fn new(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for l in lists {
            targets.extend_from_slice(l);
            offsets.push(targets.len());
        }
        NeighborLists { offsets, targets }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
    nbrs: Rc<NeighborLists>,
    /// `weights[edge * heads + h]`
    weights: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleRows(Var, Rc<[f64]>),
    ScaleBy(Var, Var, usize),
    Act(Var, Activation),
    Exp(Var),
    Sqrt(Var),
    MaskedSoftmax(Var),
    LogNormRows(Var),
    LogNormCols(Var),
    Attention(Box<AttentionCache>),
    RowMax(Var, Vec<usize>),
    Pick(Var, Rc<[(usize, usize)]>),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    RowSum(Var),
    Sum(Var),
    SpMM(Rc<SparseMatrix>, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected a scalar, found {:?}",
                m.shape()
            )));
        }
        Ok(m[(0, 0)])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// A leaf that collects gradient but is not backed by a parameter.
    pub fn variable(&mut self, value: Matrix) -> Result<Var> {
        self.push("variable", value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), Op::Param(id), true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.cols() != mb.cols() {
            return Err(Error::dim(
                "matmul_bt",
                format!("{:?} times transpose of {:?}", ma.shape(), mb.shape()),
            ));
        }
        let mut value = Matrix::zeros(ma.rows(), mb.rows());
        matmul_a_bt_into(ma, mb, &mut value);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul_bt", value, Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push("transpose", value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push("scale", value, Op::Scale(a, s), ng)
    }

    /// `x + 1 * bias` where `bias` is a single row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (mx, mb) = (self.value(x), self.value(bias));
        if mb.rows() != 1 || mb.cols() != mx.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} plus row {:?}", mx.shape(), mb.shape()),
            ));
        }
        let mut value = mx.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(mb.as_slice()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push("add_row", value, Op::AddRow(x, bias), ng)
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: Rc<[f64]>) -> Result<Var> {
        let mx = self.value(x);
        if weights.len() != mx.rows() {
            return Err(Error::dim(
                "scale_rows",
                format!("{} weights for {} rows", weights.len(), mx.rows()),
            ));
        }
        let mut value = mx.clone();
        for (i, &w) in weights.iter().enumerate() {
            for o in value.row_mut(i) {
                *o *= w;
            }
        }
        let ng = self.needs(x);
        self.push("scale_rows", value, Op::ScaleRows(x, weights), ng)
    }

    /// `s[index] * x` where `s` is any node and `index` a flat position in it.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let factor = *self
            .value(s)
            .as_slice()
            .get(index)
            .ok_or_else(|| Error::dim("scale_by", format!("index {index} out of range")))?;
        let value = self.value(x).scale(factor);
        let ng = self.needs(x) || self.needs(s);
        self.push("scale_by", value, Op::ScaleBy(x, s, index), ng)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let value = self.value(x).map(|v| act.apply(v));
        let ng = self.needs(x);
        self.push(act.name(), value, Op::Act(x, act), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        let ng = self.needs(x);
        self.push("exp", value, Op::Exp(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        let value = self.value(x).map(f64::sqrt);
        let ng = self.needs(x);
        self.push("sqrt", value, Op::Sqrt(x), ng)
    }

    /// Row-wise softmax. Masked entries (`mask[i*cols+j] == false`) are
    /// exactly zero; a row with no unmasked entry is an error.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = softmax_rows(self.value(x), mask)?;
        let ng = self.needs(x);
        self.push("masked_softmax", value, Op::MaskedSoftmax(x), ng)
    }

    /// `x - logsumexp` along each row.
    pub fn log_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let lse = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.needs(x);
        self.push("log_normalize_rows", value, Op::LogNormRows(x), ng)
    }

    /// `x - logsumexp` along each column.
    pub fn log_normalize_cols(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let (r, c) = value.shape();
        for j in 0..c {
            let lse = log_sum_exp((0..r).map(|i| value[(i, j)]));
            for i in 0..r {
                value[(i, j)] -= lse;
            }
        }
        let ng = self.needs(x);
        self.push("log_normalize_cols", value, Op::LogNormCols(x), ng)
    }

    /// Multi-head scaled dot-product attention restricted to neighbor lists.
    ///
    /// `q`, `k`, `v` are `n x (heads * d)`; head `h` owns columns
    /// `h*d..(h+1)*d`. Row `i` of the output is, per head,
    /// `sum_j a_ij v_j` over `j` in `nbrs(i)` with
    /// `a_i. = softmax(scale * q_i . k_j)`. Nodes with no neighbors get a
    /// zero row.
    pub fn neighbor_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        nbrs: Rc<NeighborLists>,
    ) -> Result<Var> {
        let (mq, mk, mv) = (self.value(q), self.value(k), self.value(v));
        let n = mq.rows();
        if mk.shape() != mq.shape()
            || mv.rows() != n
            || heads == 0
            || mq.cols() % heads != 0
            || mv.cols() % heads != 0
            || nbrs.num_nodes() != n
        {
            return Err(Error::dim(
                "neighbor_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}, {} neighbor lists",
                    mq.shape(),
                    mk.shape(),
                    mv.shape(),
                    nbrs.num_nodes()
                ),
            ));
        }
        let dk = mq.cols() / heads;
        let dv = mv.cols() / heads;
        let mut weights = vec![0.0; nbrs.num_edges() * heads];
        let mut out = Matrix::zeros(n, mv.cols());
        let mut scores = Vec::new();
        for i in 0..n {
            let list = nbrs.neighbors(i);
            if list.is_empty() {
                continue;
            }
            let base = nbrs.offsets[i];
            for h in 0..heads {
                let qi = &mq.row(i)[h * dk..(h + 1) * dk];
                scores.clear();
                for &j in list {
                    let kj = &mk.row(j)[h * dk..(h + 1) * dk];
                    scores.push(scale * dot(qi, kj));
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for (e, &j) in list.iter().enumerate() {
                    let a = scores[e] / z;
                    weights[(base + e) * heads + h] = a;
                    let vj = &mv.row(j)[h * dv..(h + 1) * dv];
                    let orow = &mut out.row_mut(i)[h * dv..(h + 1) * dv];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += a * x;
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            scale,
            nbrs,
            weights,
        };
        self.push("neighbor_attention", out, Op::Attention(Box::new(cache)), ng)
    }

    /// Per-row maximum as a column; ties go to the lowest column.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let mx = self.value(x);
        if mx.cols() == 0 {
            return Err(Error::dim("row_max", "zero columns"));
        }
        let mut arg = Vec::with_capacity(mx.rows());
        let mut data = Vec::with_capacity(mx.rows());
        for i in 0..mx.rows() {
            let (j, v) = argmax(mx.row(i));
            arg.push(j);
            data.push(v);
        }
        let value = Matrix::from_raw(mx.rows(), 1, data);
        let ng = self.needs(x);
        self.push("row_max", value, Op::RowMax(x, arg), ng)
    }

    /// Column vector of `x[r, c]` for each `(r, c)`.
    pub fn pick(&mut self, x: Var, at: Rc<[(usize, usize)]>) -> Result<Var> {
        let mx = self.value(x);
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at.iter() {
            if r >= mx.rows() || c >= mx.cols() {
                return Err(Error::dim("pick", format!("({r},{c}) in {:?}", mx.shape())));
            }
            data.push(mx[(r, c)]);
        }
        let value = Matrix::from_raw(at.len(), 1, data);
        let ng = self.needs(x);
        self.push("pick", value, Op::Pick(x, at), ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: Rc<[usize]>) -> Result<Var> {
        let mx = self.value(x);
        if rows.iter().any(|&r| r >= mx.rows()) {
            return Err(Error::dim("gather_rows", "row index out of range"));
        }
        let value = mx.select_rows(&rows);
        let ng = self.needs(x);
        self.push("gather_rows", value, Op::GatherRows(x, rows), ng)
    }

    /// Places row `k` of `x` at row `rows[k]` of a zero `total x cols`
    /// matrix. Target rows must be distinct.
    pub fn scatter_rows(&mut self, x: Var, rows: Rc<[usize]>, total: usize) -> Result<Var> {
        let mx = self.value(x);
        if rows.len() != mx.rows() || rows.iter().any(|&r| r >= total) {
            return Err(Error::dim("scatter_rows", "row map does not fit"));
        }
        let mut value = Matrix::zeros(total, mx.cols());
        for (k, &r) in rows.iter().enumerate() {
            value.row_mut(r).copy_from_slice(mx.row(k));
        }
        let ng = self.needs(x);
        self.push("scatter_rows", value, Op::ScatterRows(x, rows), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_raw(rows, cols, data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Column of row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let mx = self.value(x);
        let value = Matrix::from_raw(mx.rows(), 1, mx.row_sums());
        let ng = self.needs(x);
        self.push("row_sum", value, Op::RowSum(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Matrix::from_raw(1, 1, vec![self.value(x).sum()]);
        let ng = self.needs(x);
        self.push("sum", value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty matrix".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Constant sparse `s` times `x`.
    pub fn spmm(&mut self, s: Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let mx = self.value(x);
        if s.cols != mx.rows() {
            return Err(Error::dim(
                "spmm",
                format!("{:?} times {:?}", s.shape(), mx.shape()),
            ));
        }
        let mut value = Matrix::zeros(s.rows, mx.cols());
        for i in 0..s.rows {
            for (j, w) in s.row_entries(i) {
                let src = mx.row(j);
                for (o, &v) in value.row_mut(i).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let ng = self.needs(x);
        self.push("spmm", value, Op::SpMM(s, x), ng)
    }

    /// Accumulates `d loss / d param` into `store` for every parameter leaf
    /// reachable from `loss`. Existing gradient contents are added to, not
    /// replaced.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let dst = store.grad_mut(*id);
                if dst.shape() != g.shape() {
                    return Err(Error::dim("backward", "parameter shape changed"));
                }
                for (d, v) in dst.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *d += v;
                }
            }
        }
        Ok(())
    }

    /// Gradient of the scalar `loss` with respect to every node (None where
    /// no gradient flows).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.as_mut_slice().iter_mut().zip(contribution.as_slice()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Accumulates via a closure that writes into a zero-initialized buffer
    /// of `v`'s shape.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Matrix>],
        v: Var,
        f: impl FnOnce(&mut Matrix),
    ) {
        if !self.needs(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = G B^T, dB = A^T G
                self.accumulate_with(grads, *a, |da| matmul_a_bt_into(g, vb, da));
                self.accumulate_with(grads, *b, |db| matmul_at_b_into(va, g, db));
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // y = A B^T: dA = G B, dB = G^T A
                self.accumulate_with(grads, *a, |da| matmul_into(g, vb, da));
                self.accumulate_with(grads, *b, |db| matmul_at_b_into(g, va, db));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y)?);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *bias, Matrix::from_raw(1, g.cols(), g.col_sums()));
            }
            Op::ScaleRows(x, w) => {
                let mut d = g.clone();
                for (i, &wi) in w.iter().enumerate() {
                    d.row_mut(i).iter_mut().for_each(|v| *v *= wi);
                }
                self.accumulate(grads, *x, d);
            }
            Op::ScaleBy(x, s, index) => {
                let factor = self.value(*s).as_slice()[*index];
                self.accumulate(grads, *x, g.scale(factor));
                let vx = self.value(*x);
                let ds: f64 = g.as_slice().iter().zip(vx.as_slice()).map(|(a, b)| a * b).sum();
                self.accumulate_with(grads, *s, |d| d.as_mut_slice()[*index] += ds);
            }
            Op::Act(x, act) => {
                let d = g.zip_map(y, |gv, yv| gv * act.derivative_from_output(yv))?;
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * yv)?),
            Op::Sqrt(x) => {
                let d = g.zip_map(y, |gv, yv| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 })?;
                self.accumulate(grads, *x, d);
            }
            Op::MaskedSoftmax(x) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner = dot(yr, gr);
                    for ((dv, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogNormRows(x) => {
                let mut d = g.clone();
                for i in 0..y.rows() {
                    let s: f64 = g.row(i).iter().sum();
                    for (dv, &yv) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dv -= yv.exp() * s;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogNormCols(x) => {
                let mut d = g.clone();
                let sums = g.col_sums();
                for i in 0..y.rows() {
                    for ((dv, &yv), &s) in d.row_mut(i).iter_mut().zip(y.row(i)).zip(&sums) {
                        *dv -= yv.exp() * s;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::RowMax(x, arg) => {
                self.accumulate_with(grads, *x, |d| {
                    for (i, &j) in arg.iter().enumerate() {
                        d[(i, j)] += g[(i, 0)];
                    }
                });
            }
            Op::Pick(x, at) => {
                self.accumulate_with(grads, *x, |d| {
                    for (k, &(r, c)) in at.iter().enumerate() {
                        d[(r, c)] += g[(k, 0)];
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                self.accumulate_with(grads, *x, |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::ScatterRows(x, rows) => {
                self.accumulate(grads, *x, g.select_rows(rows));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    let idx: Vec<usize> = (start..start + r).collect();
                    self.accumulate(grads, p, g.select_rows(&idx));
                    start += r;
                }
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::SpMM(s, x) => {
                self.accumulate_with(grads, *x, |d| {
                    for i in 0..s.rows {
                        for (j, w) in s.row_entries(i) {
                            for (dv, &gv) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                                *dv += w * gv;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (mq, mk, mv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let n = mq.rows();
        let dk = mq.cols() / c.heads;
        let dv = mv.cols() / c.heads;
        let mut gq = Matrix::zeros(n, mq.cols());
        let mut gk = Matrix::zeros(mk.rows(), mk.cols());
        let mut gv = Matrix::zeros(mv.rows(), mv.cols());
        let mut da = Vec::new();
        for i in 0..n {
            let list = c.nbrs.neighbors(i);
            if list.is_empty() {
                continue;
            }
            let base = c.nbrs.offsets[i];
            for h in 0..c.heads {
                let gi = &g.row(i)[h * dv..(h + 1) * dv];
                da.clear();
                let mut inner = 0.0;
                for (e, &j) in list.iter().enumerate() {
                    let a = c.weights[(base + e) * c.heads + h];
                    let vj = &mv.row(j)[h * dv..(h + 1) * dv];
                    let d = dot(gi, vj);
                    da.push(d);
                    inner += a * d;
                    for (o, &x) in gv.row_mut(j)[h * dv..(h + 1) * dv].iter_mut().zip(gi) {
                        *o += a * x;
                    }
                }
                for (e, &j) in list.iter().enumerate() {
                    let a = c.weights[(base + e) * c.heads + h];
                    let ds = c.scale * a * (da[e] - inner);
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &mk.row(j)[h * dk..(h + 1) * dk];
                    for (o, &x) in gq.row_mut(i)[h * dk..(h + 1) * dk].iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let qi = &mq.row(i)[h * dk..(h + 1) * dk];
                    for (o, &x) in gk.row_mut(j)[h * dk..(h + 1) * dk].iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        self.accumulate(grads, c.q, gq);
        self.accumulate(grads, c.k, gk);
        self.accumulate(grads, c.v, gv);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// First index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Stabilized row softmax with an optional row-major keep-mask.
pub fn softmax_rows(m: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.len() != m.len() {
            return Err(Error::dim(
                "softmax_rows",
                format!("mask of {} for {:?}", mask.len(), m.shape()),
            ));
        }
    }
    let keep = |i: usize, j: usize| mask.map_or(true, |mk| mk[i * m.cols() + j]);
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| keep(i, j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(i, j) {
                let e = (v - max).exp();
                out[(i, j)] = e;
                z += e;
            }
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, RngStream};

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let w = store.add_glorot("w", 3, 4, &mut rng);
        let mut t = Tape::new();
        let wv = t.param(&store, w).unwrap();
        let loss = t.sum(wv).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &Matrix::filled(3, 4, 1.0));
    }

    #[test]
    fn squared_norm_gives_twice_w() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2);
        let w = store.add_glorot("w", 2, 5, &mut rng);
        let mut t = Tape::new();
        let wv = t.param(&store, w).unwrap();
        let sq = t.mul(wv, wv).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss, &mut store).unwrap();
        let expected = store.value(w).scale(2.0);
        assert!(store.grad(w).max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn unreachable_params_stay_zero() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        let a = store.add_glorot("a", 2, 2, &mut rng);
        let b = store.add_glorot("b", 2, 2, &mut rng);
        let mut t = Tape::new();
        let av = t.param(&store, a).unwrap();
        let _bv = t.param(&store, b).unwrap();
        let loss = t.sum(av).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(b), &Matrix::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::zeros(2, 2)).unwrap();
        let mut store = ParamStore::new();
        assert!(matches!(t.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::zeros(1, 2), None).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::filled(1, 1, 3.7), None).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);
        let row = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&row, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s[(0, j)] - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeroes_and_degenerate_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 5.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let mask = [true, false, true, false, false, false];
        assert!(matches!(
            softmax_rows(&m, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
        let mask = [true, false, true, false, true, false];
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(s[(1, 4 - 3)], 1.0);
        assert!((s[(0, 0)] + s[(0, 2)] - 1.0).abs() < 1e-15);
    }

    /// Builds a loss touching every primitive and checks it against
    /// central differences.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = RngStream::new(77);
        let mut store = ParamStore::new();
        let a = store.add_glorot("a", 4, 3, &mut rng);
        let b = store.add_glorot("b", 3, 6, &mut rng);
        let bias = store.add_glorot("bias", 1, 6, &mut rng);
        let s = store.add_glorot("s", 1, 3, &mut rng);
        let sparse = Rc::new(SparseMatrix::from_dense(
            &Matrix::from_rows(&[
                vec![0.5, 0.0, 0.0, 1.0],
                vec![0.0, 1.0, 0.2, 0.0],
                vec![0.3, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 1.0],
            ])
            .unwrap(),
        ));
        let nbrs = Rc::new(NeighborLists::new(&[
            vec![0, 1, 3],
            vec![1],
            vec![],
            vec![2, 3, 0],
        ]));
        let loss_fn = |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
            let a = tape.param(store, a)?;
            let b = tape.param(store, b)?;
            let bias = tape.param(store, bias)?;
            let s = tape.param(store, s)?;
            let x = tape.matmul(a, b)?; // 4x6
            let x = tape.add_row(x, bias)?;
            let x = tape.activation(x, Activation::Tanh)?;
            let att = tape.neighbor_attention(x, x, x, 2, 0.7, nbrs.clone())?;
            let y = tape.spmm(sparse.clone(), att)?;
            let y = tape.scale_by(y, s, 1)?;
            let z = tape.matmul_bt(y, x)?; // 4x4
            let z = tape.log_normalize_rows(z)?;
            let z = tape.log_normalize_cols(z)?;
            let p = tape.exp(z)?;
            let sm = tape.masked_softmax_rows(p, None)?;
            let t = tape.transpose(sm)?;
            let m = tape.mul(t, p)?;
            let rows: Rc<[usize]> = vec![3, 0].into();
            let gsel = tape.gather_rows(m, rows)?;
            let sc = tape.scatter_rows(gsel, vec![1, 2].into(), 5)?;
            let rm = tape.row_max(x)?;
            let pk = tape.pick(x, vec![(0, 1), (2, 5)].into())?;
            let cat = tape.concat_rows(&[rm, pk])?;
            let cs = tape.sum(cat)?;
            let rs = tape.row_sum(sc)?;
            let sq = tape.mul(rs, rs)?;
            let one = tape.constant(Matrix::filled(5, 1, 1.0))?;
            let sq = tape.add(sq, one)?;
            let rt = tape.sqrt(sq)?;
            let w: Rc<[f64]> = vec![1.0, -2.0, 0.5, 3.0, 1.5].into();
            let rt = tape.scale_rows(rt, w)?;
            let rt = tape.sum(rt)?;
            let total = tape.sub(rt, cs)?;
            let total = tape.scale(total, 0.5)?;
            tape.mean(total)
        };
        let mut tape = Tape::new();
        let loss = loss_fn(&store, &mut tape).unwrap();
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut t = Tape::new();
                let l = loss_fn(p, &mut t)?;
                t.scalar(l)
            },
            &store,
            1e-6,
        )
        .unwrap();
        for id in store.ids() {
            let err = store.grad(id).max_abs_diff(&fd[id.index()]).unwrap();
            let scale = store.grad(id).max_abs().max(1e-3);
            assert!(err / scale < 1e-6, "{}: {err}", store.name(id));
        }
    }
}
