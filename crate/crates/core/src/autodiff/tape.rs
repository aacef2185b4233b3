//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records primitive applications in execution order; since every
//! node's inputs are created before the node itself, the recorded order is a
//! topological order and [`Tape::backward`] visits it once, in reverse.
//! Tapes are cheap and rebuilt per batch.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Relu,
    Sigmoid,
    Log,
    Abs,
    Neg,
    Square,
    Exp,
    /// 1/x; callers guarantee nonzero inputs.
    Recip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (n x m) + broadcast row (1 x m)
    AddRow(Var, Var),
    /// (n x m) + broadcast column (n x 1)
    AddCol(Var, Var),
    /// k * x (+ constant offset applied at record time; only k matters here)
    Affine(Var, f64),
    Unary(Var, UnaryFn),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    /// n x m -> n x 1 sums over each row
    RowSums(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    /// Mask entries are 0 or 1/(1-p); applied by elementwise product.
    Dropout(Var, Matrix),
    /// Identity forward; backward multiplies the gradient by -lambda.
    GradReverse(Var, f64),
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a differentiable leaf (a trainable parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Record a non-differentiable leaf (data, labels, frozen parameters).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any was computed.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    // ----- primitives -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Dim(format!(
                "matmul: ({ar}x{ac}) * ({br}x{bc}) inner dimensions disagree"
            )));
        }
        let value = self.value(a).matmul(self.value(b));
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.requires(a);
        self.push(Op::Transpose(a), value, rg)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// (n x m) + row vector (1 x m), broadcast down the rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(Error::Dim(format!(
                "add_row: row must be 1x{ac}, got {rr}x{rc}"
            )));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(Op::AddRow(a, row), value, rg))
    }

    /// (n x m) + column vector (n x 1), broadcast across the columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ar, _) = self.shape(a);
        let (cr, cc) = self.shape(col);
        if cc != 1 || cr != ar {
            return Err(Error::Dim(format!(
                "add_col: column must be {ar}x1, got {cr}x{cc}"
            )));
        }
        let mut value = self.value(a).clone();
        let c: Vec<f64> = self.value(col).as_slice().to_vec();
        for i in 0..value.rows() {
            let b = c[i];
            for x in value.row_mut(i) {
                *x += b;
            }
        }
        let rg = self.requires(a) || self.requires(col);
        Ok(self.push(Op::AddCol(a, col), value, rg))
    }

    /// Elementwise k*x + b with constant scalars.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let value = self.value(a).map(|x| k * x + b);
        let rg = self.requires(a);
        self.push(Op::Affine(a, k), value, rg)
    }

    pub fn unary(&mut self, a: Var, f: UnaryFn) -> Var {
        let value = self.value(a).map(|x| match f {
            UnaryFn::Relu => x.max(0.0),
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::Log => x.ln(),
            UnaryFn::Abs => x.abs(),
            UnaryFn::Neg => -x,
            UnaryFn::Square => x * x,
            UnaryFn::Exp => x.exp(),
            UnaryFn::Recip => 1.0 / x,
        });
        let rg = self.requires(a);
        self.push(Op::Unary(a, f), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryFn::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryFn::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, UnaryFn::Log)
    }

    /// Clamp to [lo, hi]; gradient passes only through strictly interior entries.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.requires(a);
        self.push(Op::Clamp(a, lo, hi), value, rg)
    }

    /// Row-wise softmax with max subtraction; each output row sums to 1.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = value.row_mut(i);
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.requires(a);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    /// n x m -> n x 1 row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        let rg = self.requires(a);
        self.push(Op::RowSums(a), value, rg)
    }

    /// Normalize each column to sum 1. Column sums must be nonzero; callers
    /// skip zero-mass classes before reaching this op.
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.shape();
        let mut sums = vec![0.0; m];
        for i in 0..n {
            for (s, &v) in sums.iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        if sums.iter().any(|s| *s == 0.0) {
            return Err(Error::Contract(
                "normalize_cols: zero column sum".into(),
            ));
        }
        let value = Matrix::from_fn(n, m, |i, j| x.at(i, j) / sums[j]);
        let rg = self.requires(a);
        Ok(self.push(Op::NormalizeCols(a), value, rg))
    }

    /// Select rows by index (duplicates allowed); backward scatters-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, _) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dim(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let value = self.value(a).take_rows(idx);
        let rg = self.requires(a);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.requires(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        let rg = self.requires(a);
        self.push(Op::Mean(a), value, rg)
    }

    /// Inverted dropout: train mode zeroes entries with probability `p` and
    /// scales survivors by 1/(1-p); eval mode is the identity.
    pub fn dropout(
        &mut self,
        a: Var,
        p: f64,
        mode: DropoutMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let x = self.value(a);
        let mask = match mode {
            DropoutMode::Eval => Matrix::filled(x.rows(), x.cols(), 1.0),
            DropoutMode::Train if p == 0.0 => Matrix::filled(x.rows(), x.cols(), 1.0),
            DropoutMode::Train => {
                let keep = 1.0 / (1.0 - p);
                Matrix::from_fn(x.rows(), x.cols(), |_, _| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                })
            }
        };
        let value = x.zip_map(&mask, |v, m| v * m);
        let rg = self.requires(a);
        Ok(self.push(Op::Dropout(a, mask), value, rg))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// -lambda in the backward pass. This realizes the adversarial min-max:
    /// the discriminator sees the loss as-is while everything upstream
    /// descends on its negation scaled by `lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let value = self.value(a).clone();
        let rg = self.requires(a);
        self.push(Op::GradReverse(a, lambda), value, rg)
    }

    // ----- backward ----------------------------------------------------

    fn accumulate(&mut self, v: Var, delta: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate into every
    /// node reachable from a differentiable leaf; constants receive none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward target must be a 1x1 scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.accumulate(loss, Matrix::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &Matrix) {
        // Ops are matched by value where cheap; Matrix inputs are cloned out
        // of the node to satisfy the borrow checker on self.accumulate.
        enum Todo {
            One(Var, Matrix),
            Two(Var, Matrix, Var, Matrix),
        }
        let todo = match &self.nodes[id].op {
            Op::Leaf => return,
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da = g.matmul_transpose_b(bv); // dC * B^T
                let db = av.transpose().matmul(g); // A^T * dC
                Todo::Two(a, da, b, db)
            }
            Op::Transpose(a) => Todo::One(*a, g.transpose()),
            Op::Add(a, b) => Todo::Two(*a, g.clone(), *b, g.clone()),
            Op::Sub(a, b) => Todo::Two(*a, g.clone(), *b, g.map(|x| -x)),
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.zip_map(&self.nodes[b.0].value, |x, y| x * y);
                let db = g.zip_map(&self.nodes[a.0].value, |x, y| x * y);
                Todo::Two(a, da, b, db)
            }
            Op::AddRow(a, row) => {
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, &x) in dr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                Todo::Two(*a, g.clone(), *row, dr)
            }
            Op::AddCol(a, col) => {
                let dc = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                Todo::Two(*a, g.clone(), *col, dc)
            }
            Op::Affine(a, k) => Todo::One(*a, g.map(|x| k * x)),
            Op::Unary(a, f) => {
                let a = *a;
                let f = *f;
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[id].value;
                let da = match f {
                    UnaryFn::Relu => g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
                    UnaryFn::Sigmoid => g.zip_map(y, |gi, s| gi * s * (1.0 - s)),
                    UnaryFn::Log => g.zip_map(x, |gi, xi| gi / xi),
                    UnaryFn::Abs => g.zip_map(x, |gi, xi| gi * sign0(xi)),
                    UnaryFn::Neg => g.map(|gi| -gi),
                    UnaryFn::Square => g.zip_map(x, |gi, xi| gi * 2.0 * xi),
                    UnaryFn::Exp => g.zip_map(y, |gi, e| gi * e),
                };
                Todo::One(a, da)
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let x = &self.nodes[a.0].value;
                let da = g.zip_map(x, |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 });
                Todo::One(a, da)
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in da.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                Todo::One(a, da)
            }
            Op::RowSums(a) => {
                let a = *a;
                let (n, m) = self.nodes[a.0].value.shape();
                let da = Matrix::from_fn(n, m, |i, _| g.at(i, 0));
                Todo::One(a, da)
            }
            Op::NormalizeCols(a) => {
                let a = *a;
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[id].value;
                let (n, m) = x.shape();
                let mut sums = vec![0.0; m];
                let mut gdoty = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        sums[j] += x.at(i, j);
                        gdoty[j] += g.at(i, j) * y.at(i, j);
                    }
                }
                let da = Matrix::from_fn(n, m, |i, j| (g.at(i, j) - gdoty[j]) / sums[j]);
                Todo::One(a, da)
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let idx = idx.clone();
                let (n, m) = self.nodes[a.0].value.shape();
                let mut da = Matrix::zeros(n, m);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &x) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                Todo::One(a, da)
            }
            Op::Sum(a) => {
                let a = *a;
                let (n, m) = self.nodes[a.0].value.shape();
                Todo::One(a, Matrix::filled(n, m, g.item()))
            }
            Op::Mean(a) => {
                let a = *a;
                let (n, m) = self.nodes[a.0].value.shape();
                let scale = g.item() / (n * m) as f64;
                Todo::One(a, Matrix::filled(n, m, scale))
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                let da = g.zip_map(mask, |gi, mi| gi * mi);
                Todo::One(a, da)
            }
            Op::GradReverse(a, lambda) => Todo::One(*a, g.map(|x| -lambda * x)),
        };
        match todo {
            Todo::One(a, da) => self.accumulate(a, da),
            Todo::Two(a, da, b, db) => {
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
