//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. Nodes are appended in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep that
//! visits each node exactly once.
//!
//! All values are 2-D (`rows × cols`); scalars are `1 × 1` and bias vectors
//! are `1 × d` rows broadcast over the batch. Complex quantities are carried
//! as explicit (cosine, sine) pairs of real matrices.
//!
//! Gradients accumulate: calling `backward` twice without [`Tape::zero_grad`]
//! doubles every stored gradient.

pub mod gradcheck;
pub mod optim;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub use params::{ParamId, ParamStore, Parameter, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Sigmoid,
    Relu,
    Silu,
    Cos,
    Sin,
    Abs,
    Exp,
    Square,
}

/// A constant matrix placed at `(row, col)` inside a larger block-diagonal map.
#[derive(Debug, Clone)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub matrix: Tensor,
}

/// Constant block-sparse linear map `rows × cols`, applied as `B · x`.
#[derive(Debug, Clone)]
pub struct BlockDiag {
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<Block>,
}

impl BlockDiag {
    pub fn new(rows: usize, cols: usize, blocks: Vec<Block>) -> Result<Self> {
        for b in &blocks {
            let (r, c) = b.matrix.dim();
            if b.row + r > rows || b.col + c > cols {
                return Err(Error::shape(
                    "BlockDiag::new",
                    format!(
                        "block at ({}, {}) of {r}×{c} exceeds {rows}×{cols}",
                        b.row, b.col
                    ),
                ));
            }
        }
        Ok(Self { rows, cols, blocks })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros((self.rows, x.ncols()));
        for b in &self.blocks {
            let (r, c) = b.matrix.dim();
            let xs = x.slice(s![b.col..b.col + c, ..]);
            let mut os = out.slice_mut(s![b.row..b.row + r, ..]);
            ndarray::linalg::general_mat_mul(1.0, &b.matrix, &xs, 1.0, &mut os);
        }
        out
    }

    pub fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let mut out = Tensor::zeros((self.cols, g.ncols()));
        for b in &self.blocks {
            let (r, c) = b.matrix.dim();
            let gs = g.slice(s![b.row..b.row + r, ..]);
            let mut os = out.slice_mut(s![b.col..b.col + c, ..]);
            ndarray::linalg::general_mat_mul(1.0, &b.matrix.t(), &gs, 1.0, &mut os);
        }
        out
    }

    /// Dense equivalent, for tests.
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros((self.rows, self.cols));
        for b in &self.blocks {
            let (r, c) = b.matrix.dim();
            out.slice_mut(s![b.row..b.row + r, b.col..b.col + c])
                .assign(&b.matrix);
        }
        out
    }
}

/// Batch-norm statistics for one call: batch statistics in training mode,
/// the frozen running statistics in evaluation mode.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    Train,
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

/// Batch statistics observed in a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Unbiased estimate, as used for the running-variance update.
    pub var: Tensor,
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulConst(Var, Arc<Tensor>),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    GatherCols(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentMean(Var, Arc<[usize]>, Arc<[f64]>),
    Unary(Var, Unary),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Tensor,
        train: bool,
    },
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    BlockMatMul(Var, Arc<BlockDiag>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::Index {
            op,
            index: bad,
            bound,
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Accumulated gradient of the last backward passes, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf that is not a model parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Gradients of every parameter that was placed on the tape and reached
    /// by a backward pass, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", av.dim(), bv.dim()),
            ));
        }
        let out = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a + bias`, with `bias` a `1 × d` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", av.dim(), bv.dim()),
            ));
        }
        let out = av + bv;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let mut out = av.clone();
        Zip::from(&mut out).and(bv).for_each(|x, &y| *x = f(*x, y));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(a), &c)?;
        let out = self.value(a) * &c;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, Arc::new(c)), rg))
    }

    /// `a ⊙ c` with `c` an `n × 1` column broadcast across the columns of `a`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.ncols() != 1 || cv.nrows() != av.nrows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} ⊙ {:?}", av.dim(), cv.dim()),
            ));
        }
        let out = av * cv;
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(out, Op::MulCol(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Concatenation along the last (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let rows = self.value(*first).nrows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).nrows() != rows) {
            return Err(Error::shape(
                "concat",
                format!("{rows} rows vs {:?}", self.value(*bad).dim()),
            ));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape("concat", e.to_string()))?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let av = self.value(a);
        check_indices("gather_rows", &idx, av.nrows())?;
        let out = av.select(Axis(0), &idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx), rg))
    }

    /// `out[:, c] = a[:, idx[c]]`.
    pub fn gather_cols(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let av = self.value(a);
        check_indices("gather_cols", &idx, av.ncols())?;
        let out = av.select(Axis(1), &idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherCols(a, idx), rg))
    }

    fn segment_check(&self, op: &'static str, a: Var, seg: &[usize], n: usize) -> Result<()> {
        if seg.len() != self.value(a).nrows() {
            return Err(Error::shape(
                op,
                format!(
                    "{} segment ids for {} rows",
                    seg.len(),
                    self.value(a).nrows()
                ),
            ));
        }
        check_indices(op, seg, n)
    }

    fn segment_sum_value(&self, a: Var, seg: &[usize], n: usize) -> Tensor {
        let av = self.value(a);
        let mut out = Tensor::zeros((n, av.ncols()));
        for (r, &s) in seg.iter().enumerate() {
            let mut o = out.row_mut(s);
            o += &av.row(r);
        }
        out
    }

    /// Scatter-add of rows into `num_segments` output rows. Empty segments are zero.
    pub fn segment_sum(&mut self, a: Var, seg: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        self.segment_check("segment_sum", a, &seg, num_segments)?;
        let out = self.segment_sum_value(a, &seg, num_segments);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentSum(a, seg), rg))
    }

    /// Per-segment row mean. Empty segments are zero.
    pub fn segment_mean(&mut self, a: Var, seg: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        self.segment_check("segment_mean", a, &seg, num_segments)?;
        let mut counts = vec![0usize; num_segments];
        for &s in seg.iter() {
            counts[s] += 1;
        }
        let inv: Arc<[f64]> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        let mut out = self.segment_sum_value(a, &seg, num_segments);
        for (mut row, &k) in out.rows_mut().into_iter().zip(inv.iter()) {
            row *= k;
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentMean(a, seg, inv), rg))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).mapv(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, f), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is non-zero; the
    /// remaining entries are exactly zero. Every row needs an active entry.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let av = self.value(a);
        if let Some(m) = mask {
            same_shape("softmax_masked", av, m)?;
        }
        let mut out = av.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let active = |c: usize| mask.is_none_or(|m| m[[r, c]] != 0.0);
            let max = (0..row.len())
                .filter(|&c| active(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::shape(
                    "softmax_masked",
                    format!("row {r} has no active entries"),
                ));
            }
            let mut sum = 0.0;
            for c in 0..row.len() {
                row[c] = if active(c) { (row[c] - max).exp() } else { 0.0 };
                sum += row[c];
            }
            row /= sum;
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Batch normalisation over rows with per-column affine terms `gamma`,
    /// `beta` (`1 × d`). Training mode also returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let d = xv.ncols();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).dim() != (1, d) {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} is {:?}, expected (1, {d})", self.value(v).dim()),
                ));
            }
        }
        let n = xv.nrows();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if n == 0 {
                    return Err(Error::shape("batch_norm", "empty batch in training mode"));
                }
                let mean = xv.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
                let centered = xv - &mean;
                let var = (&centered * &centered)
                    .mean_axis(Axis(0))
                    .unwrap()
                    .insert_axis(Axis(0));
                let unbiased = if n > 1 {
                    &var * (n as f64 / (n - 1) as f64)
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.dim() != (1, d) || var.dim() != (1, d) {
                    return Err(Error::shape(
                        "batch_norm",
                        "running statistics must be (1, d)",
                    ));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (xv - &mean) * &inv_std;
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, BatchNormMode::Train);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Mean over rows: `n × d → 1 × d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.nrows() == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let out = av.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Sum over rows: `n × d → 1 × d`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let out = Tensor::from_elem((1, 1), av.sum() / av.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanAll(a), rg))
    }

    /// Applies a constant block-diagonal matrix: `B · a`.
    pub fn block_matmul(&mut self, a: Var, b: Arc<BlockDiag>) -> Result<Var> {
        let av = self.value(a);
        if av.nrows() != b.cols {
            return Err(Error::shape(
                "block_matmul",
                format!("{}×{} · {:?}", b.rows, b.cols, av.dim()),
            ));
        }
        let out = b.apply(av);
        let rg = self.rg(a);
        Ok(self.push(out, Op::BlockMatMul(a, b), rg))
    }

    /// Reverse sweep from a scalar. Gradients are added to whatever earlier
    /// passes stored.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1×1, got {:?}", self.value(loss).dim()),
            ));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut local);
            }
            accumulate(&mut self.grads[i], g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, local: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, grad: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut local[v.0], grad);
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    send(*b, val(*a).t().dot(g));
                }
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                if self.rg(*b) {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
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
                if self.rg(*a) {
                    send(*a, g * val(*b));
                }
                if self.rg(*b) {
                    send(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.rg(*a) {
                    send(*a, g / bv);
                }
                if self.rg(*b) {
                    let mut gb = g * &node.value;
                    Zip::from(&mut gb).and(bv).for_each(|x, &d| *x = -*x / d);
                    send(*b, gb);
                }
            }
            Op::MulConst(a, c) => send(*a, g * c.as_ref()),
            Op::MulCol(a, c) => {
                if self.rg(*a) {
                    send(*a, g * val(*c));
                }
                if self.rg(*c) {
                    let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*c, gc);
                }
            }
            Op::Scale(a, k) => send(*a, g * *k),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if self.rg(*p) {
                        send(*p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Tensor::zeros(val(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(src);
                    row += &g.row(r);
                }
                send(*a, ga);
            }
            Op::GatherCols(a, idx) => {
                let mut ga = Tensor::zeros(val(*a).dim());
                for (c, &src) in idx.iter().enumerate() {
                    let mut col = ga.column_mut(src);
                    col += &g.column(c);
                }
                send(*a, ga);
            }
            Op::SegmentSum(a, seg) => {
                send(*a, g.select(Axis(0), seg));
            }
            Op::SegmentMean(a, seg, inv) => {
                let mut ga = g.select(Axis(0), seg);
                for (mut row, &s) in ga.rows_mut().into_iter().zip(seg.iter()) {
                    row *= inv[s];
                }
                send(*a, ga);
            }
            Op::Unary(a, f) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(val(*a))
                    .and(&node.value)
                    .for_each(|gx, &x, &y| *gx *= f.derivative(x, y));
                send(*a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*a, y * &(g - &dot));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                if self.rg(*gamma) {
                    send(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * val(*gamma);
                    let gx = if *train {
                        let n = g.nrows() as f64;
                        let sum = dxhat.sum_axis(Axis(0)).insert_axis(Axis(0));
                        let sum_x = (&dxhat * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        ((&dxhat * n - &sum) - &(xhat * &sum_x)) * &(inv_std / n)
                    } else {
                        dxhat * inv_std
                    };
                    send(*x, gx);
                }
            }
            Op::MeanRows(a) => {
                let n = val(*a).nrows() as f64;
                let ga = Array2::from_shape_fn(val(*a).dim(), |(_, c)| g[[0, c]] / n);
                send(*a, ga);
            }
            Op::SumRows(a) => {
                let ga = Array2::from_shape_fn(val(*a).dim(), |(_, c)| g[[0, c]]);
                send(*a, ga);
            }
            Op::SumAll(a) => send(*a, Tensor::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                send(*a, Tensor::from_elem(val(*a).dim(), g[[0, 0]] / n));
            }
            Op::BlockMatMul(a, b) => send(*a, b.apply_transpose(g)),
        }
    }
}

#[cfg(test)]
mod tests;
