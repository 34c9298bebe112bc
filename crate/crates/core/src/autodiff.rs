//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! node is pushed, and [`Graph::backward`] walks the tape in reverse to
//! accumulate exact gradients for every leaf created with [`Graph::param`].
//! Nodes that do not depend on a parameter are never differentiated.

use crate::error::{Error, Result};
use crate::tensor::{self, axpy_slice, dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along grid columns (x).
    X,
    /// Along grid rows (y).
    Y,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    LnFloor(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Conv3x3 { x: Var, w: Var, h: usize, wd: usize },
    AvgPool2 { x: Var, h: usize, wd: usize },
    Upsample2 { x: Var, h: usize, wd: usize },
    ConcatCols(Var, Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    MaskedRowMax { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    GridDiff { x: Var, h: usize, wd: usize, axis: Axis },
    NormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` is
    /// not on the computation path of the loss.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the given shape, plus whether the variable was
    /// reachable from the loss.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> (Matrix, bool) {
        match self.get(var) {
            Some(g) => (g.clone(), true),
            None => (Matrix::zeros(shape.0, shape.1), false),
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), rg))
    }

    fn same(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", (n, c), self.shape(row)));
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            axpy_slice(v.row_mut(i), 1.0, &r);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(v, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of `x` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(shape_err("mul_row", (n, c), self.shape(row)));
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (a, b) in v.row_mut(i).iter_mut().zip(&r) {
                *a *= b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(v, Op::MulRow(x, row), rg))
    }

    /// Scales row `i` of `x` by `col[i]` (`col` is `n×1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(col) != (n, 1) {
            return Err(shape_err("mul_col", (n, c), self.shape(col)));
        }
        let mut v = self.value(x).clone();
        for i in 0..n {
            let s = self.value(col).data()[i];
            for a in v.row_mut(i) {
                *a *= s;
            }
        }
        let rg = self.rg(&[x, col]);
        Ok(self.push(v, Op::MulCol(x, col), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scaled(s);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a / (1.0 + (-a).exp()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|a| a.max(floor).ln());
        let rg = self.rg(&[x]);
        self.push(v, Op::LnFloor(x, floor), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = tensor::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n = (m.rows() * m.cols()).max(1) as f64;
        let v = Matrix::scalar(m.sum() / n);
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Zero-padded 3×3 convolution over an `h × wd` grid.
    ///
    /// `x` is `(h·wd) × cin`; `w` is `(9·cin) × cout` with row index
    /// `(ky·3 + kx)·cin + ci`.
    pub fn conv3x3(&mut self, x: Var, w: Var, h: usize, wd: usize) -> Result<Var> {
        let (n, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        if n != h * wd || wr != 9 * cin {
            return Err(shape_err("conv3x3", (n, cin), (wr, cout)));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Matrix::zeros(n, cout);
        for py in 0..h {
            for px in 0..wd {
                let p = py * wd + px;
                for (k, q) in neighbors(py, px, h, wd) {
                    let xrow = xv.row(q);
                    for (ci, &a) in xrow.iter().enumerate() {
                        if a != 0.0 {
                            let wrow = wv.row(k * cin + ci);
                            axpy_slice(out.row_mut(p), a, wrow);
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv3x3 { x, w, h, wd }, rg))
    }

    /// 2×2 average pooling over an `h × wd` grid (both even).
    pub fn avg_pool2(&mut self, x: Var, h: usize, wd: usize) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n != h * wd || !h.is_multiple_of(2) || !wd.is_multiple_of(2) {
            return Err(Error::shape(format!("avg_pool2 on {h}x{wd} grid with {n} rows")));
        }
        let (oh, ow) = (h / 2, wd / 2);
        let xv = self.value(x);
        let mut out = Matrix::zeros(oh * ow, c);
        for y in 0..oh {
            for xx in 0..ow {
                let o = out.row_mut(y * ow + xx);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    axpy_slice(o, 0.25, xv.row((2 * y + dy) * wd + 2 * xx + dx));
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool2 { x, h, wd }, rg))
    }

    /// Nearest-neighbour 2× upsampling of an `h × wd` grid.
    pub fn upsample2(&mut self, x: Var, h: usize, wd: usize) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n != h * wd {
            return Err(Error::shape(format!("upsample2 on {h}x{wd} grid with {n} rows")));
        }
        let ow = 2 * wd;
        let xv = self.value(x);
        let mut out = Matrix::zeros(4 * n, c);
        for y in 0..2 * h {
            for xx in 0..ow {
                out.row_mut(y * ow + xx)
                    .copy_from_slice(xv.row((y / 2) * wd + xx / 2));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2 { x, h, wd }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if n != nb {
            return Err(shape_err("concat_cols", (n, ca), (nb, cb)));
        }
        let mut out = Matrix::zeros(n, ca + cb);
        for i in 0..n {
            let row = out.row_mut(i);
            row[..ca].copy_from_slice(self.nodes[a.0].value.row(i));
            row[ca..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Normalizes each row to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNormRows { x, inv_std }, rg)
    }

    /// Row-wise maximum over the columns where `col_mask` is true.
    ///
    /// Returns the `n×1` maxima and the winning column of each row. The
    /// gradient flows to the winning entry only.
    pub fn masked_row_max(&mut self, x: Var, col_mask: &[bool]) -> Result<(Var, Vec<usize>)> {
        let (n, c) = self.shape(x);
        if col_mask.len() != c {
            return Err(Error::shape(format!(
                "masked_row_max: mask of {} for {c} columns",
                col_mask.len()
            )));
        }
        if !col_mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask("no columns selected for row maximum"));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(n, 1);
        let mut argmax = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mut best = usize::MAX;
            let mut bv = f64::NEG_INFINITY;
            for (j, (&v, &m)) in row.iter().zip(col_mask).enumerate() {
                // First maximum wins ties, like torch.max.
                if m && (best == usize::MAX || v > bv) {
                    best = j;
                    bv = v;
                }
            }
            out.data_mut()[i] = bv;
            argmax.push(best);
        }
        let rg = self.rg(&[x]);
        let v = self.push(out, Op::MaskedRowMax { x, argmax: argmax.clone() }, rg);
        Ok((v, argmax))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, _) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_rows: row {bad} of {n}")));
        }
        let v = self.value(x).gather_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Forward differences along one grid axis. Along `X` the output has
    /// `h·(wd−1)` rows, along `Y` it has `(h−1)·wd` rows.
    pub fn grid_diff(&mut self, x: Var, h: usize, wd: usize, axis: Axis) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n != h * wd {
            return Err(Error::shape(format!("grid_diff on {h}x{wd} grid with {n} rows")));
        }
        let xv = self.value(x);
        let pairs = diff_pairs(h, wd, axis);
        let mut out = Matrix::zeros(pairs.len(), c);
        for (o, &(a, b)) in pairs.iter().enumerate() {
            let (ra, rb) = (xv.row(a), xv.row(b));
            for ((dst, &va), &vb) in out.row_mut(o).iter_mut().zip(ra).zip(rb) {
                *dst = vb - va;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GridDiff { x, h, wd, axis }, rg))
    }

    /// Scales each row to unit L2 norm (rows of norm zero are left as is).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                for a in row.iter_mut() {
                    *a /= n;
                }
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::NormalizeRows { x, norms }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape(format!("loss must be scalar, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves keep their gradients.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = g.matmul_t(bv).expect("shapes checked in forward");
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    tensor::matmul_tn_into(av, g, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = g.matmul(bv).expect("shapes checked in forward");
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    tensor::matmul_tn_into(g, av, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scaled(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        axpy_slice(dr.data_mut(), 1.0, g.row(i));
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row);
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for i in 0..dx.rows() {
                        for (a, b) in dx.row_mut(i).iter_mut().zip(rv.data()) {
                            *a *= b;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*row) {
                    let xv = self.value(*x);
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for ((d, a), b) in dr.data_mut().iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulCol(x, col) => {
                let cv = self.value(*col);
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for i in 0..dx.rows() {
                        let s = cv.data()[i];
                        for a in dx.row_mut(i) {
                            *a *= s;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*col) {
                    let xv = self.value(*x);
                    let mut dc = Matrix::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        dc.data_mut()[i] = dot(g.row(i), xv.row(i));
                    }
                    self.accumulate(grads, *col, dc);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scaled(*s)),
            Op::Silu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, a| {
                    let s = 1.0 / (1.0 + (-a).exp());
                    gv * (s + a * s * (1.0 - s))
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(y, |a, b| a * b)),
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(*x), |gv, a| {
                    if a > 0.0 {
                        gv
                    } else if a < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::LnFloor(x, floor) => {
                let dx = g.zip_map(self.value(*x), |gv, a| if a > *floor { gv / a } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, g.item() / n));
            }
            Op::Conv3x3 { x, w, h, wd } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let cin = xv.cols();
                let mut dx = self.wants(*x).then(|| Matrix::zeros(xv.rows(), cin));
                let mut dw = self.wants(*w).then(|| Matrix::zeros(wv.rows(), wv.cols()));
                for py in 0..*h {
                    for px in 0..*wd {
                        let p = py * wd + px;
                        let grow = g.row(p);
                        for (k, q) in neighbors(py, px, *h, *wd) {
                            if let Some(dx) = dx.as_mut() {
                                let drow = dx.row_mut(q);
                                for (ci, d) in drow.iter_mut().enumerate() {
                                    *d += dot(grow, wv.row(k * cin + ci));
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                for (ci, &a) in xv.row(q).iter().enumerate() {
                                    if a != 0.0 {
                                        axpy_slice(dw.row_mut(k * cin + ci), a, grow);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::AvgPool2 { x, h, wd } => {
                let (oh, ow) = (h / 2, wd / 2);
                let mut dx = Matrix::zeros(h * wd, g.cols());
                for yy in 0..oh {
                    for xx in 0..ow {
                        let gr = g.row(yy * ow + xx);
                        for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            axpy_slice(dx.row_mut((2 * yy + dy) * wd + 2 * xx + dxo), 0.25, gr);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x, h, wd } => {
                let ow = 2 * wd;
                let mut dx = Matrix::zeros(h * wd, g.cols());
                for yy in 0..2 * h {
                    for xx in 0..ow {
                        axpy_slice(dx.row_mut((yy / 2) * wd + xx / 2), 1.0, g.row(yy * ow + xx));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let n = g.rows();
                if self.wants(*a) {
                    let mut da = Matrix::zeros(n, ca);
                    for i in 0..n {
                        da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let cb = self.shape(*b).1;
                    let mut db = Matrix::zeros(n, cb);
                    for i in 0..n {
                        db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                let c = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgy = dot(gr, yr) / c;
                    for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = inv_std[i] * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedRowMax { x, argmax } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (i, &j) in argmax.iter().enumerate() {
                    dx.set(i, j, g.data()[i]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    axpy_slice(dx.row_mut(i), 1.0, g.row(o));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GridDiff { x, h, wd, axis } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (o, (a, b)) in diff_pairs(*h, *wd, *axis).into_iter().enumerate() {
                    axpy_slice(dx.row_mut(b), 1.0, g.row(o));
                    axpy_slice(dx.row_mut(a), -1.0, g.row(o));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let n = norms[i];
                    if n > 0.0 {
                        let yr = y.row(i);
                        let s = dot(yr, g.row(i));
                        for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                            *d = (*d - yv * s) / n;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

/// In-bounds 3×3 neighbours of `(py, px)` as `(kernel index, row index)`.
#[inline]
fn neighbors(py: usize, px: usize, h: usize, wd: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..9usize).filter_map(move |k| {
        let y = py as isize + (k / 3) as isize - 1;
        let x = px as isize + (k % 3) as isize - 1;
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < wd)
            .then(|| (k, y as usize * wd + x as usize))
    })
}

/// Row index pairs `(a, b)` whose difference `b − a` is a forward difference.
pub(crate) fn diff_pairs(h: usize, wd: usize, axis: Axis) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    match axis {
        Axis::X => {
            for y in 0..h {
                for x in 0..wd.saturating_sub(1) {
                    out.push((y * wd + x, y * wd + x + 1));
                }
            }
        }
        Axis::Y => {
            for y in 0..h.saturating_sub(1) {
                for x in 0..wd {
                    out.push((y * wd + x, (y + 1) * wd + x));
                }
            }
        }
    }
    out
}
