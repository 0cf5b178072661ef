//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every leaf that asked for one.

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather index that produces an all-zero row.
pub const PAD: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    GroupMax { x: Var, arg: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    BceWithLogits { x: Var, targets: Vec<f64> },
    SmoothL1 { x: Var, beta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    bound: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter, if it took part in the computation.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.bound
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Moves the per-parameter gradients out, indexed by parameter id.
    pub fn into_param_grads(mut self, count: usize) -> Vec<Option<Matrix>> {
        (0..count)
            .map(|i| {
                self.bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].take())
            })
            .collect()
    }
}

impl Graph {
    /// Graph that tracks gradients for parameters and [`Graph::variable`] leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph for inference: nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient when the graph tracks gradients.
    pub fn variable(&mut self, value: Matrix) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.bound.len() <= i {
            self.bound.resize(i + 1, None);
        }
        if let Some(v) = self.bound[i] {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.bound[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul inner dimensions");
        let value = va.matmul(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_nt inner dimensions");
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            va.data(),
            false,
            vb.data(),
            true,
            0.0,
            out.data_mut(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shapes");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row` with `row` (1×c) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "add_row broadcast shape");
        let mut value = va.clone();
        let r = vr.data().to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row` with `row` (1×c) broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "mul_row broadcast shape");
        let mut value = va.clone();
        let r = vr.data().to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization (zero mean, unit variance) without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (n, c) = va.shape();
        let mut value = va.clone();
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = value.row_mut(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * s;
            }
            inv_std.push(s);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            let c = vp.cols();
            for i in 0..rows {
                value.row_mut(i)[off..off + c].copy_from_slice(vp.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats).expect("concat_rows column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row `i` of the result is row `idx[i]` of `a`, or zeros for [`PAD`].
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut value = Matrix::zeros(idx.len(), c);
        for (i, &j) in idx.iter().enumerate() {
            if j != PAD {
                value.row_mut(i).copy_from_slice(va.row(j));
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows { x: a, idx }, rg)
    }

    /// Elementwise max over consecutive blocks of `group` rows: (G·group)×C → G×C.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let va = self.value(a);
        let (n, c) = va.shape();
        assert!(
            group > 0 && n % group == 0,
            "group_max: {n} rows not divisible by {group}"
        );
        let g = n / group;
        let mut value = Matrix::zeros(g, c);
        let mut arg = vec![0usize; g * c];
        for gi in 0..g {
            let base = gi * group;
            let out = value.row_mut(gi);
            out.copy_from_slice(va.row(base));
            arg[gi * c..(gi + 1) * c].fill(base);
            for r in base + 1..base + group {
                let row = va.row(r);
                for ch in 0..c {
                    // strict comparison keeps the first maximum
                    if row[ch] > out[ch] {
                        out[ch] = row[ch];
                        arg[gi * c + ch] = r;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::GroupMax { x: a, arg }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.cols(), "slice_cols bounds");
        let rows = va.rows();
        let mut value = Matrix::zeros(rows, end - start);
        for i in 0..rows {
            value.row_mut(i).copy_from_slice(&va.row(i)[start..end]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols { x: a, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshaped(rows, cols)
            .expect("reshape size mismatch");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise binary cross-entropy of `sigmoid(a)` against `targets`.
    pub fn bce_with_logits(&mut self, a: Var, targets: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), targets.len(), "bce target count");
        let data = va
            .data()
            .iter()
            .zip(&targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::BceWithLogits { x: a, targets }, rg)
    }

    /// Elementwise smooth-L1 of residuals `a`.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        let value = self.value(a).map(|e| {
            if e.abs() < beta {
                0.5 * e * e / beta
            } else {
                e.abs() - 0.5 * beta
            }
        });
        let rg = self.rg(a);
        self.push(value, Op::SmoothL1 { x: a, beta }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        if !self.rg(v) {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn backprop(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        false,
                        vb.data(),
                        true,
                        1.0,
                        ga.data_mut(),
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        va.data(),
                        true,
                        g.data(),
                        false,
                        1.0,
                        gb.data_mut(),
                    );
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        false,
                        vb.data(),
                        false,
                        1.0,
                        ga.data_mut(),
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        g.data(),
                        true,
                        va.data(),
                        false,
                        1.0,
                        gb.data_mut(),
                    );
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (d, s) in gb.data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let vb = self.value(*b).data();
                    for ((d, s), w) in ga.data_mut().iter_mut().zip(g.data()).zip(vb) {
                        *d += s * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let va = self.value(*a).data();
                    for ((d, s), w) in gb.data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d += s * w;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    let gr = gr.data_mut();
                    for i in 0..g.rows() {
                        for (d, s) in gr.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let vr = self.value(*row).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.rows() {
                        for ((d, s), w) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(vr) {
                            *d += s * w;
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, *row) {
                    let va = self.value(*a);
                    let gr = gr.data_mut();
                    for i in 0..g.rows() {
                        for ((d, s), x) in gr.iter_mut().zip(g.row(i)).zip(va.row(i)) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += s * v;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, v), o) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        if *o > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, v), o) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += v * o * (1.0 - o);
                    }
                }
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, v), x) in ga.data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d += 2.0 * x * v;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, p), q) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(ga) = self.acc(grads, *x) {
                    let c = y.cols() as f64;
                    for i in 0..g.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let mg = gr.iter().sum::<f64>() / c;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c;
                        let s = inv_std[i];
                        for ((d, q), yy) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *d += s * (q - mg - yy * mgy);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..g.rows() {
                            for (d, s) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if let Some(gp) = self.acc(grads, p) {
                        let c = g.cols();
                        for (d, s) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[off * c..(off + r) * c])
                        {
                            *d += s;
                        }
                    }
                    off += r;
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &j) in idx.iter().enumerate() {
                        if j != PAD {
                            for (d, s) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::GroupMax { x, arg, .. } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = g.cols();
                    for (flat, &src) in arg.iter().enumerate() {
                        let ch = flat % c;
                        let v = g.data()[flat];
                        gx.row_mut(src)[ch] += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let w = g.cols();
                    for i in 0..g.rows() {
                        for (d, s) in gx.row_mut(i)[*start..*start + w].iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, s) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                if let Some(gx) = self.acc(grads, *x) {
                    for d in gx.data_mut() {
                        *d += s;
                    }
                }
            }
            Op::BceWithLogits { x, targets } => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (((d, s), &v), t) in
                        gx.data_mut().iter_mut().zip(g.data()).zip(vx).zip(targets)
                    {
                        *d += s * (sigmoid(v) - t);
                    }
                }
            }
            Op::SmoothL1 { x, beta } => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), &e) in gx.data_mut().iter_mut().zip(g.data()).zip(vx) {
                        let de = if e.abs() < *beta {
                            e / beta
                        } else {
                            e.signum()
                        };
                        *d += s * de;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
