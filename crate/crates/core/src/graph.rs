//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! op is added) and [`Graph::backward`] walks the tape in reverse. Parameters
//! are pulled from a [`ParamStore`]; frozen parameters enter as constants so
//! no gradient is ever produced for them.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{bail, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, softmax_rows, standardize_rows, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Attention visibility pattern for [`Graph::softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    /// Every key visible.
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// The first `n` positions form a bidirectional prefix that cannot see
    /// later positions; later positions see the prefix and are causal
    /// among themselves.
    Prefix(usize),
}

impl Mask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            Mask::Full => true,
            Mask::Causal => j <= i,
            Mask::Prefix(n) => {
                if i < n {
                    j < n
                } else {
                    j <= i
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    Standardize(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SegmentMean(Var, Vec<Range<usize>>),
    Sum(Var),
    RowNorm(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        denom: f64,
    },
    PassThrough(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Backward {
    grads: Vec<Option<Matrix>>,
    params: Gradients,
}

impl Backward {
    /// Gradient with respect to any node, if one reached it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

/// An eagerly-evaluated computation tape.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph without parameters, for pure-input computations.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(512),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("graph has no parameter store")
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant; gradients never flow into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`'s value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// The node for a stored parameter. Frozen parameters are constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.store();
        let value = store.get(id).clone();
        let v = if store.is_trainable(id) {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        };
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Shape,
                "{}: {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols() != bv.rows() {
            bail!(Shape, "matmul {:?} by {:?}", av.shape(), bv.shape());
        }
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols() != bv.cols() {
            bail!(Shape, "matmul_t {:?} by {:?}ᵀ", av.shape(), bv.shape());
        }
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = f(*o, y);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            bail!(Shape, "add_row {:?} with {:?}", av.shape(), rv.shape());
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            bail!(Shape, "mul_row {:?} with {:?}", av.shape(), rv.shape());
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o *= r;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by a `1 × 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            bail!(Shape, "scale_by expects a 1x1 scalar, got {:?}", self.shape(s));
        }
        let k = self.nodes[s.0].value.item();
        let out = self.nodes[a.0].value.map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(libm::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Row-wise softmax under `mask`; masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Mask) -> Var {
        let out = softmax_rows(&self.nodes[a.0].value, |i, j| mask.allows(i, j));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Per-row standardization (zero mean, unit variance, `eps` inside the root).
    pub fn standardize(&mut self, a: Var, eps: f64) -> Var {
        let (out, inv) = standardize_rows(&self.nodes[a.0].value, eps);
        let ng = self.ng(a);
        self.push(out, Op::Standardize(a, inv), ng)
    }

    /// Selects rows by index (embedding lookup, repetition, slicing).
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            bail!(Argument, "row index {} out of range for {} rows", bad, av.rows());
        }
        let out = av.select_rows(&indices);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Gather(a, indices), ng))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        self.gather(a, range.collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Argument, "concat_rows of nothing");
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                bail!(Shape, "concat_rows: {} columns vs {}", v.cols(), cols);
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Argument, "concat_cols of nothing");
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                bail!(Shape, "concat_cols: {} rows vs {}", self.shape(p).0, rows);
            }
            cols += self.shape(p).1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if range.end > av.cols() || range.start > range.end {
            bail!(Shape, "column slice {:?} of {} columns", range, av.cols());
        }
        let mut out = Matrix::zeros(av.rows(), range.len());
        for i in 0..av.rows() {
            out.row_mut(i).copy_from_slice(&av.row(i)[range.clone()]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, range.start), ng))
    }

    /// Row `w` of the output is the mean of rows `segments[w]` of `a`.
    pub fn segment_mean(&mut self, a: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        for s in &segments {
            if s.is_empty() || s.end > av.rows() {
                bail!(Argument, "segment {:?} invalid for {} rows", s, av.rows());
            }
        }
        let out = segment_means(av, &segments);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentMean(a, segments), ng))
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of each row, as a column `k × 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(av.rows(), 1);
        for i in 0..av.rows() {
            let s: f64 = av.row(i).iter().map(|x| x * x).sum();
            out.set(i, 0, libm::sqrt(s));
        }
        let ng = self.ng(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// `Σ_rows −log softmax(logits)[target] / denom`; rows whose target is
    /// `None` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        denom: f64,
    ) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if targets.len() != lv.rows() {
            bail!(
                Shape,
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                lv.rows()
            );
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= lv.cols()) {
            bail!(Argument, "target {} out of range for {} classes", t, lv.cols());
        }
        if !(denom > 0.0) {
            bail!(Argument, "cross_entropy denominator must be positive");
        }
        let probs = softmax_rows(lv, |_, _| true);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(i);
                total += crate::tensor::log_sum_exp(row) - row[t];
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::scalar(total / denom),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            },
            ng,
        ))
    }

    /// Forward value `value`, backward identity into `a` (straight-through).
    pub fn pass_through(&mut self, a: Var, value: Matrix) -> Result<Var> {
        if self.shape(a) != value.shape() {
            bail!(
                Shape,
                "pass_through: {:?} vs {:?}",
                self.shape(a),
                value.shape()
            );
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::PassThrough(a), ng))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.shape(loss) != (1, 1) {
            bail!(Shape, "backward from non-scalar {:?}", self.shape(loss));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut params = Gradients::new(self.param_nodes.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Backward { grads, params })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        params: &mut Gradients,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, m: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(x) => x.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        let want = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::MatMul(a, b) => {
                if want(*a) {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm(1.0, g, false, val(*b), true, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if want(*b) {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm(1.0, val(*a), true, g, false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                if want(*a) {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm(1.0, g, false, val(*b), false, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if want(*b) {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm(1.0, g, true, val(*a), false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if want(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(*a, hadamard(g, val(*b)));
                }
                if want(*b) {
                    acc(*b, hadamard(g, val(*a)));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if want(*r) {
                    acc(*r, column_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                if want(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, s) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if want(*r) {
                    acc(*r, column_sums(&hadamard(g, val(*a))));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, g.map(|x| x * s));
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s).item();
                if want(*a) {
                    acc(*a, g.map(|x| x * k));
                }
                if want(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Matrix::scalar(d));
                }
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (x, &v) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                    if v <= 0.0 {
                        *x = 0.0;
                    }
                }
                acc(*a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                for (x, &v) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                    *x *= gelu_grad(v);
                }
                acc(*a, ga);
            }
            Op::Exp(a) => acc(*a, hadamard(g, &node.value)),
            Op::Softmax(a) => {
                let p = &node.value;
                let mut ga = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let (pr, gr) = (p.row(i), g.row(i));
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (o, (pi, gi)) in ga.row_mut(i).iter_mut().zip(pr.iter().zip(gr)) {
                        *o = pi * (gi - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::Standardize(a, inv) => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (o, (gi, yi)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = inv[i] * (gi - mg - yi * mgy);
                    }
                }
                acc(*a, ga);
            }
            Op::Gather(a, idx) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if want(p) {
                        acc(p, g.select_rows(&(off..off + r).collect::<Vec<_>>()));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if want(p) {
                        let mut gp = Matrix::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::SegmentMean(a, segs) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for (w, s) in segs.iter().enumerate() {
                    let k = 1.0 / s.len() as f64;
                    for r in s.clone() {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(w)) {
                            *o += x * k;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let av = val(*a);
                acc(*a, Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::RowNorm(a) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let n = node.value.get(i, 0);
                    if n > 0.0 {
                        let k = g.get(i, 0) / n;
                        for (o, x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o = x * k;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                let k = g.item() / denom;
                let mut ga = Matrix::zeros(probs.rows(), probs.cols());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, p) in ga.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *o = p * k;
                        }
                        ga.row_mut(i)[t] -= k;
                    }
                }
                acc(*logits, ga);
            }
            Op::PassThrough(a) => acc(*a, g.clone()),
        }
    }
}

/// Means of consecutive row segments, summing rows in order.
pub fn segment_means(a: &Matrix, segments: &[Range<usize>]) -> Matrix {
    let mut out = Matrix::zeros(segments.len(), a.cols());
    for (w, s) in segments.iter().enumerate() {
        let o = out.row_mut(w);
        for r in s.clone() {
            for (x, v) in o.iter_mut().zip(a.row(r)) {
                *x += v;
            }
        }
        let n = s.len() as f64;
        for x in o.iter_mut() {
            *x /= n;
        }
    }
    out
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, x) in out.data_mut().iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
