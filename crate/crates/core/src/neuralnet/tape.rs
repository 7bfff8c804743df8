//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse to produce gradients for the recorded parameters.

use std::rc::Rc;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `c = beta·c + a·b` where `a` is `m×k` and `b` is `k×n`, each given with
/// explicit (row, column) strides so transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every index the strides can reach,
    // and `c` is a distinct, exclusively borrowed buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, (a.cols as isize, 1), &b.data, (b.cols as isize, 1), 0.0, &mut c.data);
    c
}

/// `a · bᵀ`
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_bt {}x{} by ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols);
    let mut c = Tensor::zeros(a.rows, b.rows);
    gemm(a.rows, a.cols, b.rows, &a.data, (a.cols as isize, 1), &b.data, (1, b.cols as isize), 0.0, &mut c.data);
    c
}

/// `acc += aᵀ · b`
fn matmul_at_acc(a: &Tensor, b: &Tensor, acc: &mut Tensor) {
    assert_eq!(a.rows, b.rows);
    gemm(a.cols, a.rows, b.cols, &a.data, (1, a.cols as isize), &b.data, (b.cols as isize, 1), 1.0, &mut acc.data);
}

/// `acc += a · b`
fn matmul_acc(a: &Tensor, b: &Tensor, acc: &mut Tensor) {
    gemm(a.rows, a.cols, b.cols, &a.data, (a.cols as isize, 1), &b.data, (b.cols as isize, 1), 1.0, &mut acc.data);
}

/// Neighbor lists of one mesh, applied blockwise to frames stacked by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub adjacency: Vec<Vec<usize>>,
}

impl Neighborhood {
    pub fn vertex_count(&self) -> usize {
        self.adjacency.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    Reshape(Var),
    NeighborMean(Var, Rc<Neighborhood>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Mse(Var, Rc<Tensor>),
    SumAll(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of every recorded parameter, keyed by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

#[derive(Debug, Default)]
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    /// A trainable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBT(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "elementwise shape mismatch");
        Tensor::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!((r.rows, r.cols), (1, x.cols), "row broadcast shape");
        let mut v = x.clone();
        for row in v.data.chunks_mut(x.cols) {
            for (e, b) in row.iter_mut().zip(&r.data) {
                *e += b;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1×n` row `g`.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Var {
        let (x, r) = (self.value(a), self.value(g));
        assert_eq!((r.rows, r.cols), (1, x.cols), "row broadcast shape");
        let mut v = x.clone();
        for row in v.data.chunks_mut(x.cols) {
            for (e, g) in row.iter_mut().zip(&r.data) {
                *e *= g;
            }
        }
        self.push(v, Op::MulRow(a, g))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| f(*p)).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| s * x);
        self.push(v, Op::Scale(a, s))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape {}x{} to {rows}x{cols}", x.rows, x.cols);
        let v = Tensor::from_vec(rows, cols, x.data.clone());
        self.push(v, Op::Reshape(a))
    }

    /// Row `f·V + i` becomes the mean of rows `f·V + j` over the neighbors `j` of `i`.
    pub fn neighbor_mean(&mut self, a: Var, nbh: &Rc<Neighborhood>) -> Var {
        let x = self.value(a);
        let nv = nbh.vertex_count();
        assert!(nv > 0 && x.rows % nv == 0, "{} rows is not a whole number of {nv}-vertex frames", x.rows);
        let c = x.cols;
        let mut v = Tensor::zeros(x.rows, c);
        for f in 0..x.rows / nv {
            for (i, ring) in nbh.adjacency.iter().enumerate() {
                let w = 1.0 / ring.len() as f64;
                let out = &mut v.data[(f * nv + i) * c..(f * nv + i + 1) * c];
                for &j in ring {
                    for (o, s) in out.iter_mut().zip(x.row(f * nv + j)) {
                        *o += w * s;
                    }
                }
            }
        }
        self.push(v, Op::NeighborMean(a, Rc::clone(nbh)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut v = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows);
        let v = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.data[r * cols + offset..r * cols + offset + x.cols].copy_from_slice(x.row(r));
            }
            offset += x.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&x.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Row-wise softmax; entries where `allowed` is false get probability 0.
    /// Every row needs at least one allowed entry.
    pub fn softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let c = x.cols;
        let mut v = Tensor::zeros(x.rows, c);
        for r in 0..x.rows {
            let ok = |k: usize| allowed.map_or(true, |m| m[r * c + k]);
            let max = (0..c).filter(|&k| ok(k)).map(|k| x.at(r, k)).fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite() || max.is_nan(), "softmax row {r} has no allowed entries");
            let mut sum = 0.0;
            for k in 0..c {
                if ok(k) {
                    let e = (x.at(r, k) - max).exp();
                    v.data[r * c + k] = e;
                    sum += e;
                }
            }
            for e in &mut v.data[r * c..(r + 1) * c] {
                *e /= sum;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    /// Normalizes every row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols as f64;
        let mut v = Tensor::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / c;
            let s = 1.0 / (var + eps).sqrt();
            for (o, e) in v.data[r * x.cols..(r + 1) * x.cols].iter_mut().zip(row) {
                *o = (e - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    /// Mean squared difference from a constant target, as a `1×1` tensor.
    pub fn mse(&mut self, a: Var, target: Rc<Tensor>) -> Var {
        let x = self.value(a);
        assert_eq!((x.rows, x.cols), (target.rows, target.cols), "mse shape mismatch");
        let n = x.len().max(1) as f64;
        let s = x.data.iter().zip(&target.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Mse(a, target))
    }

    /// Sum of `1×1` tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let s = parts.iter().map(|p| self.value(*p).data[0]).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(parts.to_vec()))
    }

    /// Back-propagates from the `1×1` node `loss`; parameter gradients are
    /// indexed by parameter id (`param_count` slots).
    pub fn backward(&self, loss: Var, param_count: usize) -> ParamGrads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut out = ParamGrads {
            grads: vec![None; param_count],
        };

        fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &Tensor) -> &'a mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.rows, shape.cols))
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => match &mut out.grads[*pid] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    // dA += dC·Bᵀ, dB += Aᵀ·dC
                    let da = matmul_bt(&g, vb);
                    acc(&mut grads, *a, va).add_assign(&da);
                    matmul_at_acc(va, &g, acc(&mut grads, *b, vb));
                }
                Op::MatMulBT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    // C = A·Bᵀ: dA += dC·B, dB += dCᵀ·A
                    matmul_acc(&g, vb, acc(&mut grads, *a, va));
                    matmul_at_acc(&g, va, acc(&mut grads, *b, vb));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g).add_assign(&g);
                    acc(&mut grads, *b, &g).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g).add_assign(&g);
                    let gb = acc(&mut grads, *b, &g);
                    for (e, d) in gb.data.iter_mut().zip(&g.data) {
                        *e -= d;
                    }
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *a, &g).add_assign(&g);
                    let gb = acc(&mut grads, *b, self.value(*b));
                    for row in g.data.chunks(g.cols) {
                        for (e, d) in gb.data.iter_mut().zip(row) {
                            *e += d;
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (self.value(*a), self.value(*r));
                    let ga = acc(&mut grads, *a, va);
                    for (grow, gradrow) in ga.data.chunks_mut(g.cols).zip(g.data.chunks(g.cols)) {
                        for ((e, d), s) in grow.iter_mut().zip(gradrow).zip(&vr.data) {
                            *e += d * s;
                        }
                    }
                    let gr = acc(&mut grads, *r, vr);
                    for (xrow, gradrow) in va.data.chunks(g.cols).zip(g.data.chunks(g.cols)) {
                        for ((e, d), x) in gr.data.iter_mut().zip(gradrow).zip(xrow) {
                            *e += d * x;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, y);
                    for ((e, d), y) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *e += d * (1.0 - y * y);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = acc(&mut grads, *a, x);
                    for ((e, d), x) in ga.data.iter_mut().zip(&g.data).zip(&x.data) {
                        if *x > 0.0 {
                            *e += d;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, &g);
                    for (e, d) in ga.data.iter_mut().zip(&g.data) {
                        *e += s * d;
                    }
                }
                Op::Reshape(a) => {
                    let x = self.value(*a);
                    let ga = acc(&mut grads, *a, x);
                    for (e, d) in ga.data.iter_mut().zip(&g.data) {
                        *e += d;
                    }
                }
                Op::NeighborMean(a, nbh) => {
                    let x = self.value(*a);
                    let nv = nbh.vertex_count();
                    let c = x.cols;
                    let ga = acc(&mut grads, *a, x);
                    for f in 0..x.rows / nv {
                        for (i, ring) in nbh.adjacency.iter().enumerate() {
                            let w = 1.0 / ring.len() as f64;
                            let src = &g.data[(f * nv + i) * c..(f * nv + i + 1) * c];
                            for &j in ring {
                                let dst = &mut ga.data[(f * nv + j) * c..(f * nv + j + 1) * c];
                                for (o, s) in dst.iter_mut().zip(src) {
                                    *o += w * s;
                                }
                            }
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let ga = acc(&mut grads, *a, x);
                    for r in 0..g.rows {
                        for (e, d) in ga.data[r * x.cols + start..r * x.cols + start + g.cols].iter_mut().zip(g.row(r)) {
                            *e += d;
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let ga = acc(&mut grads, *a, x);
                    for (e, d) in ga.data[start * x.cols..(start + g.rows) * x.cols].iter_mut().zip(&g.data) {
                        *e += d;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let x = self.value(*p);
                        let gp = acc(&mut grads, *p, x);
                        for r in 0..g.rows {
                            for (e, d) in gp.data[r * x.cols..(r + 1) * x.cols]
                                .iter_mut()
                                .zip(&g.row(r)[offset..offset + x.cols])
                            {
                                *e += d;
                            }
                        }
                        offset += x.cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let x = self.value(*p);
                        let gp = acc(&mut grads, *p, x);
                        for (e, d) in gp.data.iter_mut().zip(&g.data[offset..offset + x.len()]) {
                            *e += d;
                        }
                        offset += x.len();
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols;
                    let ga = acc(&mut grads, *a, y);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            ga.data[r * c + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let c = y.cols;
                    let n = c as f64;
                    let ga = acc(&mut grads, *a, y);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for k in 0..c {
                            ga.data[r * c + k] += inv_std[r] * (gr[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                }
                Op::Mse(a, target) => {
                    let x = self.value(*a);
                    let scale = 2.0 * g.data[0] / x.len().max(1) as f64;
                    let ga = acc(&mut grads, *a, x);
                    for ((e, p), q) in ga.data.iter_mut().zip(&x.data).zip(&target.data) {
                        *e += scale * (p - q);
                    }
                }
                Op::SumAll(parts) => {
                    for p in parts {
                        let gp = acc(&mut grads, *p, &g);
                        gp.data[0] += g.data[0];
                    }
                }
            }
        }
        out
    }
}
