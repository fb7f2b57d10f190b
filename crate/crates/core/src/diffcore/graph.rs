//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and records how to route gradients back to
//! its inputs. A graph is built once per loss evaluation and then discarded.

use super::tensor::Tensor;

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Minimum magnitude kept by [`Graph::div_rows_guarded`].
pub const DIV_EPS: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GroupMax(Var, Vec<usize>),
    Sum(Var),
    RowSums(Var),
    MeanRows(Var),
    DivRowsGuarded(Var, Var),
    CosineRows(Var, Var),
    MultiPerspective(Var, Var, Var),
    KlDiv(Var, Var),
    ClampMax(Var, f64),
    Pick(Var, usize, usize),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GroupMax(..) => "group_max",
            Op::Sum(_) => "sum",
            Op::RowSums(_) => "row_sums",
            Op::MeanRows(_) => "mean_rows",
            Op::DivRowsGuarded(..) => "div_rows_guarded",
            Op::CosineRows(..) => "cosine_rows",
            Op::MultiPerspective(..) => "multi_perspective",
            Op::KlDiv(..) => "kl_div",
            Op::ClampMax(..) => "clamp_max",
            Op::Pick(..) => "pick",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if no path exists.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
    first_nonfinite: Option<&'static str>,
}

/// Cosine of `a` and `b` together with the partial derivatives with respect to each.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    let na = na2.sqrt();
    let nb = nb2.sqrt();
    let da = na.max(COSINE_EPS);
    let db = nb.max(COSINE_EPS);
    let c = dot / (da * db);
    let mut ga: Vec<f64> = b.iter().map(|y| y / (da * db)).collect();
    let mut gb: Vec<f64> = a.iter().map(|x| x / (da * db)).collect();
    if na > COSINE_EPS {
        for (g, x) in ga.iter_mut().zip(a) {
            *g -= c * x / na2;
        }
    }
    if nb > COSINE_EPS {
        for (g, y) in gb.iter_mut().zip(b) {
            *g -= c * y / nb2;
        }
    }
    (c, ga, gb)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    dot / (na2.sqrt().max(COSINE_EPS) * nb2.sqrt().max(COSINE_EPS))
}

fn guarded(s: f64) -> f64 {
    if s >= 0.0 {
        s + DIV_EPS
    } else {
        s - DIV_EPS
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Name of the first operation that produced a NaN or infinite value.
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.first_nonfinite
    }

    /// Parameter leaves registered so far, as `(slot, var)` pairs.
    pub fn params(&self) -> &[(usize, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(op.name());
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::DivRowsGuarded(a, b)
            | Op::CosineRows(a, b)
            | Op::KlDiv(a, b) => self.rg(*a) || self.rg(*b),
            Op::MultiPerspective(a, b, c) => self.rg(*a) || self.rg(*b) || self.rg(*c),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::GroupMax(a, _)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::MeanRows(a)
            | Op::ClampMax(a, _)
            | Op::Pick(a, ..)
            | Op::Reshape(a) => self.rg(*a),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Trainable leaf bound to parameter `slot` of a parameter store.
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        let v = self.push(value, Op::Param);
        self.params.push((slot, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).matmul(self.val(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 × m` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.val(a);
        let rv = self.val(row);
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.val(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.val(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                let pv = self.val(*p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
                c0 += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.val(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.val(*p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.val(a);
        assert!(start + width <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), width);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Rows `[start, start + count)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let av = self.val(a);
        assert!(start + count <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Tensor::from_vec(count, c, av.data()[start * c..(start + count) * c].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    /// Output row `t` is input row `indices[t]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.val(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(av.row(i));
        }
        self.push(Tensor::from_vec(indices.len(), c, data), Op::GatherRows(a, indices.to_vec()))
    }

    /// Elementwise maximum over consecutive blocks of `group` rows.
    ///
    /// Output row `i` holds the column-wise max of input rows
    /// `i*group .. (i+1)*group`. Gradient flows only to the winning row; ties
    /// go to the lowest row.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let av = self.val(a);
        assert!(group >= 1 && av.rows().is_multiple_of(group), "group_max: rows not divisible by group");
        let n = av.rows() / group;
        let c = av.cols();
        let mut out = Tensor::zeros(n, c);
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for col in 0..c {
                let mut best_row = i * group;
                let mut best = av.get(best_row, col);
                for j in 1..group {
                    let r = i * group + j;
                    let v = av.get(r, col);
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                out.set(i, col, best);
                argmax[i * c + col] = best_row;
            }
        }
        self.push(out, Op::GroupMax(a, argmax))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `n × 1` column of per-row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        self.push(Tensor::from_vec(av.rows(), 1, data), Op::RowSums(a))
    }

    /// `1 × m` row holding the mean of each column.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let n = av.rows() as f64;
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x / n;
            }
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Divides row `i` of `x` by `s[i] + 1e-8·sign(s[i])` (sign(0) = +1), so the
    /// divisor never falls below `1e-8` in magnitude.
    pub fn div_rows_guarded(&mut self, x: Var, s: Var) -> Var {
        let xv = self.val(x);
        let sv = self.val(s);
        assert_eq!(sv.shape(), [xv.rows(), 1], "div_rows_guarded expects an n×1 divisor");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let d = guarded(sv.get(r, 0));
            for o in out.row_mut(r) {
                *o /= d;
            }
        }
        self.push(out, Op::DivRowsGuarded(x, s))
    }

    /// `n × 1` column of ε-guarded cosines between matching rows of `a` and `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.val(a);
        let bv = self.val(b);
        assert_eq!(av.shape(), bv.shape(), "cosine_rows shape mismatch");
        let data = (0..av.rows()).map(|r| cosine(av.row(r), bv.row(r))).collect();
        self.push(Tensor::from_vec(av.rows(), 1, data), Op::CosineRows(a, b))
    }

    /// Multi-perspective cosine matching of paired rows.
    ///
    /// `x` and `y` are `n × d`, `w` is `l × d`; output `[i, k]` is
    /// `cos(w_k ∘ x_i, w_k ∘ y_i)`.
    pub fn multi_perspective(&mut self, x: Var, y: Var, w: Var) -> Var {
        let xv = self.val(x);
        let yv = self.val(y);
        let wv = self.val(w);
        assert_eq!(xv.shape(), yv.shape(), "multi_perspective input mismatch");
        assert_eq!(xv.cols(), wv.cols(), "multi_perspective weight width mismatch");
        let (n, l, d) = (xv.rows(), wv.rows(), xv.cols());
        let mut out = Tensor::zeros(n, l);
        let mut u = vec![0.0; d];
        let mut v = vec![0.0; d];
        for i in 0..n {
            for k in 0..l {
                let wk = wv.row(k);
                for t in 0..d {
                    u[t] = wk[t] * xv.get(i, t);
                    v[t] = wk[t] * yv.get(i, t);
                }
                out.set(i, k, cosine(&u, &v));
            }
        }
        self.push(out, Op::MultiPerspective(x, y, w))
    }

    /// `Σ_t p_t ln(p_t / q_t)` for `1 × T` rows; terms with `p_t = 0` contribute 0.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Var {
        let pv = self.val(p);
        let qv = self.val(q);
        assert_eq!(pv.shape(), qv.shape(), "kl_div shape mismatch");
        let d = pv
            .data()
            .iter()
            .zip(qv.data())
            .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
            .sum();
        self.push(Tensor::scalar(d), Op::KlDiv(p, q))
    }

    /// `min(a, cap)` elementwise; no gradient where the cap binds.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Var {
        let out = self.val(a).map(|x| x.min(cap));
        self.push(out, Op::ClampMax(a, cap))
    }

    /// The single element `a[r, c]` as a scalar.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = self.val(a).get(r, c);
        self.push(Tensor::scalar(v), Op::Pick(a, r, c))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = Tensor::from_vec(rows, cols, self.val(a).data().to_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Sum of `1 × 1` scalars.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let row = self.concat_cols(parts);
        self.sum(row)
    }

    /// Mean of `1 × 1` scalars.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Var {
        let s = self.add_scalars(parts);
        self.scale(s, 1.0 / parts.len() as f64)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.val(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let y = &node.value;
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.matmul(&self.val(*b).transpose()));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, self.val(*a).transpose().matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut gr = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.val(*b), |x, y| x * y));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_map(y, |x, t| x * (1.0 - t * t))),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, g.zip_map(y, |x, s| x * s * (1.0 - s))),
                Op::Relu(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.val(*a), |x, z| if z > 0.0 { x } else { 0.0 }))
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(y, |x, e| x * e)),
                Op::Log(a) => accumulate(&mut grads, *a, g.zip_map(self.val(*a), |x, z| x / z)),
                Op::SoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.val(*p).cols();
                        if self.rg(*p) {
                            let mut gp = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                            }
                            accumulate(&mut grads, *p, gp);
                        }
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    let c = g.cols();
                    for p in parts {
                        let h = self.val(*p).rows();
                        if self.rg(*p) {
                            let gp = Tensor::from_vec(h, c, g.data()[r0 * c..(r0 + h) * c].to_vec());
                            accumulate(&mut grads, *p, gp);
                        }
                        r0 += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let av = self.val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let c = av.cols();
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let av = self.val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (t, &src) in indices.iter().enumerate() {
                        for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(t)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupMax(a, argmax) => {
                    let av = self.val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let c = g.cols();
                    for i in 0..g.rows() {
                        for col in 0..c {
                            let src = argmax[i * c + col];
                            let cur = ga.get(src, col);
                            ga.set(src, col, cur + g.get(i, col));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let av = self.val(*a);
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g.item()));
                }
                Op::RowSums(a) => {
                    let av = self.val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let gr = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|o| *o = gr);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let av = self.val(*a);
                    let n = av.rows() as f64;
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o = x / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::DivRowsGuarded(x, s) => {
                    let xv = self.val(*x);
                    let sv = self.val(*s);
                    if self.rg(*x) {
                        let mut gx = g.clone();
                        for r in 0..gx.rows() {
                            let d = guarded(sv.get(r, 0));
                            gx.row_mut(r).iter_mut().for_each(|o| *o /= d);
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.rg(*s) {
                        let mut gs = Tensor::zeros(sv.rows(), 1);
                        for r in 0..sv.rows() {
                            let d = guarded(sv.get(r, 0));
                            let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                            gs.set(r, 0, -dot / (d * d));
                        }
                        accumulate(&mut grads, *s, gs);
                    }
                }
                Op::CosineRows(a, b) => {
                    let av = self.val(*a);
                    let bv = self.val(*b);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let (_, da, db) = cosine_with_grad(av.row(r), bv.row(r));
                        let gr = g.get(r, 0);
                        for (o, x) in ga.row_mut(r).iter_mut().zip(&da) {
                            *o = gr * x;
                        }
                        for (o, x) in gb.row_mut(r).iter_mut().zip(&db) {
                            *o = gr * x;
                        }
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MultiPerspective(x, yv_, w) => {
                    let xv = self.val(*x);
                    let yv = self.val(*yv_);
                    let wv = self.val(*w);
                    let (n, l, d) = (xv.rows(), wv.rows(), xv.cols());
                    let mut gx = Tensor::zeros(n, d);
                    let mut gy = Tensor::zeros(n, d);
                    let mut gw = Tensor::zeros(l, d);
                    let mut u = vec![0.0; d];
                    let mut v = vec![0.0; d];
                    for i in 0..n {
                        for k in 0..l {
                            let gik = g.get(i, k);
                            if gik == 0.0 {
                                continue;
                            }
                            let wk = wv.row(k);
                            for t in 0..d {
                                u[t] = wk[t] * xv.get(i, t);
                                v[t] = wk[t] * yv.get(i, t);
                            }
                            let (_, du, dv) = cosine_with_grad(&u, &v);
                            for t in 0..d {
                                gx.data_mut()[i * d + t] += gik * du[t] * wk[t];
                                gy.data_mut()[i * d + t] += gik * dv[t] * wk[t];
                                gw.data_mut()[k * d + t] += gik * (du[t] * xv.get(i, t) + dv[t] * yv.get(i, t));
                            }
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.rg(*yv_) {
                        accumulate(&mut grads, *yv_, gy);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, gw);
                    }
                }
                Op::KlDiv(p, q) => {
                    let pv = self.val(*p);
                    let qv = self.val(*q);
                    let s = g.item();
                    if self.rg(*p) {
                        let gp = pv.zip_map(qv, |a, b| if a > 0.0 { s * ((a / b).ln() + 1.0) } else { 0.0 });
                        accumulate(&mut grads, *p, gp);
                    }
                    if self.rg(*q) {
                        let gq = pv.zip_map(qv, |a, b| -s * a / b);
                        accumulate(&mut grads, *q, gq);
                    }
                }
                Op::ClampMax(a, cap) => {
                    let cap = *cap;
                    accumulate(&mut grads, *a, g.zip_map(self.val(*a), |x, z| if z < cap { x } else { 0.0 }));
                }
                Op::Pick(a, r, c) => {
                    let av = self.val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    ga.set(*r, *c, g.item());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let av = self.val(*a);
                    accumulate(&mut grads, *a, Tensor::from_vec(av.rows(), av.cols(), g.into_data()));
                }
            }
        }
        Gradients { grads }
    }
}
