//! The computation tape: graph construction and reverse-mode backprop.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::sparse::SparseMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalarVar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Recip(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    MeanRowsSubset(Var, Rc<Vec<usize>>),
    PoolRows(Var, usize),
    ConcatCols(Var, Var),
    ConcatRows(Rc<Vec<Var>>),
    SliceCols(Var, usize, usize),
    Rows(Var, Rc<Vec<usize>>),
    RowL2Normalize(Var),
    SpMatmul {
        x: Var,
        mt: Rc<SparseMatrix>,
    },
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    PickPerRow(Var, Rc<Vec<usize>>),
    Dropout(Var, Rc<Array2<f64>>),
    /// Scalar output with a precomputed gradient w.r.t. its single parent.
    CustomScalar(Var, Rc<Array2<f64>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation graph over `Array2<f64>` values.
///
/// Nodes are appended in topological order, so a single reverse sweep
/// suffices for backpropagation. A tape is meant to live for one
/// forward/backward step and then be dropped or [`Tape::clear`]ed.
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter bindings for this step: (param id, leaf var).
    binds: Vec<(usize, Var)>,
}

const ROW_NORM_EPS_SQ: f64 = 1e-24;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), binds: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.binds.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub(crate) fn record_bind(&mut self, param_id: usize, var: Var) {
        self.binds.push((param_id, var));
    }

    pub(crate) fn find_bind(&self, param_id: usize) -> Option<Var> {
        self.binds.iter().find(|(p, _)| *p == param_id).map(|(_, v)| *v)
    }

    pub fn bound_params(&self) -> &[(usize, Var)] {
        &self.binds
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: participates in values but never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Trainable leaf: gradients are accumulated for it during backward.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Broadcast add of a `[1, d]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects [1, d] rhs");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let value = self.value(a) + self.value(row);
        let needs = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let needs = self.ng(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// Multiplies every entry of `a` by the `[1, 1]` node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar_var expects scalar rhs");
        let sv = self.scalar(s);
        let value = self.value(a) * sv;
        let needs = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalarVar(a, s), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul inner dim mismatch");
        let value = self.value(a).dot(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Matmul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let needs = self.ng(a);
        self.push(value, Op::Transpose(a), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let needs = self.ng(a);
        self.push(value, Op::Gelu(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.ng(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let needs = self.ng(a);
        self.push(value, Op::Tanh(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.ng(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let needs = self.ng(a);
        self.push(value, Op::Exp(a), needs)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / x);
        let needs = self.ng(a);
        self.push(value, Op::Recip(a), needs)
    }

    /// Per-row layer normalization with learned `[1, d]` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let value = &value * self.value(gamma) + self.value(beta);
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, eps }, needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let needs = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let needs = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let needs = self.ng(a);
        self.push(value, Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = Array2::from_elem((1, 1), self.value(a).sum() / n);
        let needs = self.ng(a);
        self.push(value, Op::MeanAll(a), needs)
    }

    /// Column-wise mean over all rows, yielding `[1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = v.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let needs = self.ng(a);
        self.push(value, Op::MeanRows(a), needs)
    }

    /// Column-wise mean over the selected rows, yielding `[1, d]`.
    pub fn mean_rows_subset(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        assert!(!idx.is_empty(), "mean_rows_subset needs at least one row");
        let v = self.value(a);
        let mut acc = Array2::zeros((1, v.ncols()));
        for &r in idx.iter() {
            acc.row_mut(0).zip_mut_with(&v.row(r), |o, &x| *o += x);
        }
        acc /= idx.len() as f64;
        let needs = self.ng(a);
        self.push(acc, Op::MeanRowsSubset(a, idx), needs)
    }

    /// Non-overlapping temporal mean pooling over rows with window `s`;
    /// a partial tail window is averaged over its remaining rows.
    pub fn pool_rows(&mut self, a: Var, window: usize) -> Var {
        assert!(window >= 1, "pool window must be >= 1");
        let v = self.value(a);
        let t = v.nrows();
        let n = t.div_ceil(window);
        let mut out = Array2::zeros((n, v.ncols()));
        for w in 0..n {
            let lo = w * window;
            let hi = ((w + 1) * window).min(t);
            let len = (hi - lo) as f64;
            for r in lo..hi {
                out.row_mut(w).zip_mut_with(&v.row(r), |o, &x| *o += x / len);
            }
        }
        let needs = self.ng(a);
        self.push(out, Op::PoolRows(a, window), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "concat_cols row mismatch");
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols");
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows on empty slice");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        let needs = parts.iter().any(|&v| self.ng(v));
        self.push(value, Op::ConcatRows(Rc::new(parts.to_vec())), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.shape(a).1, "slice_cols out of range");
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let needs = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), needs)
    }

    /// Gathers rows of `a` by index (rows may repeat); backward scatter-adds.
    pub fn rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(a);
        let mut out = Array2::zeros((idx.len(), v.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&v.row(r));
        }
        let needs = self.ng(a);
        self.push(out, Op::Rows(a, idx), needs)
    }

    /// L2-normalizes each row: `y = x / sqrt(||x||^2 + 1e-24)`, so zero rows
    /// map to zero rows instead of NaN.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let ss: f64 = row.iter().map(|x| x * x).sum();
            let inv = 1.0 / (ss + ROW_NORM_EPS_SQ).sqrt();
            row.mapv_inplace(|x| x * inv);
        }
        let needs = self.ng(a);
        self.push(out, Op::RowL2Normalize(a), needs)
    }

    /// Left-multiplies by a fixed sparse matrix: `y = m · x`. The caller
    /// supplies the transpose once so it is not rebuilt per step.
    pub fn sparse_matmul(&mut self, m: &SparseMatrix, mt: &Rc<SparseMatrix>, x: Var) -> Var {
        let value = m.matmul(self.value(x));
        let needs = self.ng(x);
        self.push(value, Op::SpMatmul { x, mt: Rc::clone(mt) }, needs)
    }

    /// Sliding-window unfold for 1-D convolution over rows. Input `[t, c]`
    /// becomes `[t_out, kernel*c]` with zero padding of `pad` rows per side
    /// and the given stride.
    pub fn unfold_rows(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        assert!(kernel >= 1 && stride >= 1);
        let v = self.value(x);
        let (t, c) = v.dim();
        let padded = t + 2 * pad;
        assert!(padded >= kernel, "unfold: sequence shorter than kernel");
        let t_out = (padded - kernel) / stride + 1;
        let mut out = Array2::zeros((t_out, kernel * c));
        for w in 0..t_out {
            for j in 0..kernel {
                let src = (w * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    out.slice_mut(s![w, j * c..(j + 1) * c]).assign(&v.row(src as usize));
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::Unfold { x, kernel, stride, pad }, needs)
    }

    /// Picks one entry per row: `y[i, 0] = a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(a);
        assert_eq!(v.nrows(), idx.len(), "pick_per_row length mismatch");
        let mut out = Array2::zeros((idx.len(), 1));
        for (i, &c) in idx.iter().enumerate() {
            out[[i, 0]] = v[[i, c]];
        }
        let needs = self.ng(a);
        self.push(out, Op::PickPerRow(a, idx), needs)
    }

    /// Applies a precomputed dropout mask whose kept entries already carry
    /// the `1/(1-p)` scale.
    pub fn dropout(&mut self, a: Var, mask: Rc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), mask.dim(), "dropout mask shape mismatch");
        let value = self.value(a) * &*mask;
        let needs = self.ng(a);
        self.push(value, Op::Dropout(a, mask), needs)
    }

    /// Registers a scalar whose gradient w.r.t. `parent` was computed by the
    /// caller (for losses with hand-derived gradients, e.g. dynamic programs).
    pub fn custom_scalar(&mut self, parent: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(self.shape(parent), grad.dim(), "custom_scalar grad shape mismatch");
        let needs = self.ng(parent);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::CustomScalar(parent, Rc::new(grad)),
            needs,
        )
    }

    /// Runs reverse-mode accumulation from the scalar node `root` and returns
    /// per-node gradients (None for nodes not needing or not reached).
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_grad(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn push_grad(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    acc(grads, *a, g * *c);
                }
            }
            Op::MulScalarVar(a, scalar) => {
                let sv = self.scalar(*scalar);
                if self.ng(*a) {
                    acc(grads, *a, g * sv);
                }
                if self.ng(*scalar) {
                    let dot = (g * self.value(*a)).sum();
                    acc(grads, *scalar, Array2::from_elem((1, 1), dot));
                }
            }
            Op::Matmul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g.t().to_owned());
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g * &self.value(*a).mapv(gelu_grad));
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g * &self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                }
            }
            Op::Tanh(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value;
                    acc(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
                }
            }
            Op::Sigmoid(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value;
                    acc(grads, *a, g * &y.mapv(|s| s * (1.0 - s)));
                }
            }
            Op::Exp(a) => {
                if self.ng(*a) {
                    acc(grads, *a, g * &self.nodes[i].value);
                }
            }
            Op::Recip(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value;
                    acc(grads, *a, -(g * &y.mapv(|v| v * v)));
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.ncols() as f64;
                let mut gx = Array2::zeros(xv.dim());
                let mut ggamma = Array2::zeros((1, xv.ncols()));
                let mut gbeta = Array2::zeros((1, xv.ncols()));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let grow = g.row(r);
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat * xhat
                    for j in 0..xv.ncols() {
                        let dxh = grow[j] * gv[[0, j]];
                        m1 += dxh;
                        m2 += dxh * xhat[j];
                        ggamma[[0, j]] += grow[j] * xhat[j];
                        gbeta[[0, j]] += grow[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    for j in 0..xv.ncols() {
                        let dxh = grow[j] * gv[[0, j]];
                        gx[[r, j]] = inv * (dxh - m1 - xhat[j] * m2);
                    }
                }
                if self.ng(*x) {
                    acc(grads, *x, gx);
                }
                if self.ng(*gamma) {
                    acc(grads, *gamma, ggamma);
                }
                if self.ng(*beta) {
                    acc(grads, *beta, gbeta);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[r, j]] * y[[r, j]]).sum();
                        for j in 0..y.ncols() {
                            gx[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[i].value; // log-probs
                    let mut gx = g.clone();
                    for r in 0..y.nrows() {
                        let gsum: f64 = g.row(r).sum();
                        for j in 0..y.ncols() {
                            gx[[r, j]] -= y[[r, j]].exp() * gsum;
                        }
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::SumAll(a) => {
                if self.ng(*a) {
                    let shape = self.shape(*a);
                    acc(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
            }
            Op::MeanAll(a) => {
                if self.ng(*a) {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1) as f64;
                    acc(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
            }
            Op::MeanRows(a) => {
                if self.ng(*a) {
                    let (t, d) = self.shape(*a);
                    let mut gx = Array2::zeros((t, d));
                    for r in 0..t {
                        for j in 0..d {
                            gx[[r, j]] = g[[0, j]] / t as f64;
                        }
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::MeanRowsSubset(a, idx) => {
                if self.ng(*a) {
                    let (t, d) = self.shape(*a);
                    let mut gx = Array2::zeros((t, d));
                    let n = idx.len() as f64;
                    for &r in idx.iter() {
                        for j in 0..d {
                            gx[[r, j]] += g[[0, j]] / n;
                        }
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::PoolRows(a, window) => {
                if self.ng(*a) {
                    let (t, d) = self.shape(*a);
                    let mut gx = Array2::zeros((t, d));
                    let n = t.div_ceil(*window);
                    for w in 0..n {
                        let lo = w * window;
                        let hi = ((w + 1) * window).min(t);
                        let len = (hi - lo) as f64;
                        for r in lo..hi {
                            for j in 0..d {
                                gx[[r, j]] = g[[w, j]] / len;
                            }
                        }
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::ConcatCols(a, b) => {
                let da = self.shape(*a).1;
                if self.ng(*a) {
                    acc(grads, *a, g.slice(s![.., ..da]).to_owned());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.slice(s![.., da..]).to_owned());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts.iter() {
                    let rows = self.shape(p).0;
                    if self.ng(p) {
                        acc(grads, p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.ng(*a) {
                    let (t, d) = self.shape(*a);
                    let mut gx = Array2::zeros((t, d));
                    gx.slice_mut(s![.., *start..*end]).assign(g);
                    acc(grads, *a, gx);
                }
            }
            Op::Rows(a, idx) => {
                if self.ng(*a) {
                    let (t, d) = self.shape(*a);
                    let mut gx = Array2::zeros((t, d));
                    for (i_out, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[[r, j]] += g[[i_out, j]];
                        }
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::RowL2Normalize(a) => {
                if self.ng(*a) {
                    let xv = self.value(*a);
                    let mut gx = Array2::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let ss: f64 = row.iter().map(|x| x * x).sum();
                        let norm = (ss + ROW_NORM_EPS_SQ).sqrt();
                        let dot: f64 = (0..row.len()).map(|j| g[[r, j]] * row[j]).sum();
                        for j in 0..row.len() {
                            gx[[r, j]] = g[[r, j]] / norm - row[j] * dot / norm.powi(3);
                        }
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::SpMatmul { x, mt, .. } => {
                if self.ng(*x) {
                    acc(grads, *x, mt.matmul(g));
                }
            }
            Op::Unfold { x, kernel, stride, pad } => {
                if self.ng(*x) {
                    let (t, c) = self.shape(*x);
                    let mut gx = Array2::zeros((t, c));
                    for w in 0..g.nrows() {
                        for j in 0..*kernel {
                            let src = (w * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                for ch in 0..c {
                                    gx[[src as usize, ch]] += g[[w, j * c + ch]];
                                }
                            }
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::PickPerRow(a, idx) => {
                if self.ng(*a) {
                    let (t, d) = self.shape(*a);
                    let mut gx = Array2::zeros((t, d));
                    for (r, &col) in idx.iter().enumerate() {
                        gx[[r, col]] += g[[r, 0]];
                    }
                    acc(grads, *a, gx);
                }
            }
            Op::Dropout(a, mask) => {
                if self.ng(*a) {
                    acc(grads, *a, g * &**mask);
                }
            }
            Op::CustomScalar(parent, grad_matrix) => {
                if self.ng(*parent) {
                    acc(grads, *parent, &**grad_matrix * g[[0, 0]]);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
