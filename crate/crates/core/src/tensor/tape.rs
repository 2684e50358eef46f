use rand::Rng;

use super::{matmul_raw, transpose_raw, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Gelu(Var),
    Dropout(Var, Vec<S>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Define-by-run gradient tape.
///
/// Every operation appends a node whose inputs were recorded earlier, so the
/// insertion order is a topological order and [`Tape::backward`] simply walks
/// it in reverse. A tape is meant for one forward pass; it can be
/// back-propagated exactly once.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
    S::lit(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_K) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(&[rows, cols]))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward seed with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let shape = self.nodes[v.0].value.shape();
        match *shape {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: shape.to_vec(),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        let da = self.dims(op, a)?;
        let db = self.dims(op, b)?;
        if da != db {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![da.0, da.1],
                rhs: vec![db.0, db.1],
            });
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, m) = self.dims("matmul", a)?;
        let (m2, p) = self.dims("matmul", b)?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, m],
                rhs: vec![m2, p],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, m, p);
        let value = Tensor::matrix(n, p, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a `1 × c` bias to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims("add_row", a)?;
        let (br, bc) = self.dims("add_row", bias)?;
        if br != 1 || bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![br, bc],
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &bj) in row.iter_mut().zip(b) {
                *x += bj;
            }
        }
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var, TensorError> {
        let (r, c) = self.dims("scale", a)?;
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::Scale(a, factor), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims("transpose", a)?;
        let data = transpose_raw(self.value(a).data(), r, c);
        let value = Tensor::matrix(c, r, data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Concatenates along the last axis. All parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (rows, _) = self.dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices vertically. All parts need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, cols) = self.dims("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: vec![c],
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims("gather_rows", a)?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        let value = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims("slice_cols", a)?;
        if start + width > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + width,
                bound: c,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * width);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + width]);
        }
        let value = Tensor::matrix(r, width, data)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    /// Column-wise mean, `r × c -> 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims("mean_rows", a)?;
        if r == 0 {
            return Err(TensorError::Invalid {
                op: "mean_rows",
                msg: "zero rows".into(),
            });
        }
        let mut data = vec![S::zero(); c];
        for row in self.value(a).data().chunks(c) {
            for (acc, &x) in data.iter_mut().zip(row) {
                *acc += x;
            }
        }
        let inv = S::one() / S::lit(r as f64);
        data.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(Tensor::row_vector(data), Op::MeanRows(a), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.dims("sum_all", a)?;
        let s = self.value(a).sum();
        Ok(self.push(Tensor::row_vector(vec![s]), Op::SumAll(a), &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims("gelu", a)?;
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::Gelu(a), &[a]))
    }

    /// Inverted dropout. `p == 0` returns `a` unchanged without recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.dims("dropout", a)?;
        let keep_scale = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = zip_with(self.value(a).data(), &mask, |x, m| x * m);
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::Dropout(a, mask), &[a]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims("softmax_rows", a)?;
        let src = self.value(a).data();
        if src.iter().any(|x| x.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in src.chunks(c) {
            softmax_into(row, &mut data);
        }
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Per-row normalization to zero mean / unit variance followed by the
    /// affine map `gain ⊙ x̂ + bias`. `gain` and `bias` are `1 × d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, d) = self.dims("layer_norm", x)?;
        for p in [gain, bias] {
            let shape = self.dims("layer_norm", p)?;
            if shape != (1, d) {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![1, d],
                    rhs: vec![shape.0, shape.1],
                });
            }
        }
        if d == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "zero width".into(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_d = S::one() / S::lit(d as f64);
        let mut xhat = Vec::with_capacity(r * d);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let istd = S::one() / (var + S::lit(eps)).sqrt();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let value = Tensor::matrix(r, d, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed with a fused log-softmax. Returns a `1 × 1` value.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = self.dims("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n],
                rhs: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: "empty batch".into(),
            });
        }
        let src = self.value(logits).data();
        if src.iter().any(|x| x.is_nan()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = S::zero();
        for (row, &y) in src.chunks(c).zip(labels) {
            if y >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: y,
                    bound: c,
                });
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / S::lit(n as f64);
        Ok(self.push(
            Tensor::row_vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a `1 × 1` value with seed 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.value(loss).shape().to_vec();
        if shape != [1, 1] {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_with(loss, Tensor::full(&[1, 1], S::one()))
    }

    /// Back-propagates an arbitrary upstream gradient (vector-Jacobian
    /// product) from `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor<S>) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.value(out).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        self.backward_done = true;
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = self.vjp(i, &op, &g)?;
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                self.accumulate(v, dg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<S>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g) {
                    *e += x;
                }
            }
            None => {
                let shape = node.value.shape().to_vec();
                node.grad = Some(Tensor { shape, data: g });
            }
        }
    }

    fn vjp(&self, i: usize, op: &Op<S>, g: &Tensor<S>) -> Result<Vec<(Var, Vec<S>)>, TensorError> {
        let gd = g.data();
        let out = match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (n, m) = self.dims("matmul", *a)?;
                let (_, p) = self.dims("matmul", *b)?;
                let mut res = Vec::new();
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), m, p);
                    res.push((*a, matmul_raw(gd, &bt, n, p, m)));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), n, m);
                    res.push((*b, matmul_raw(&at, gd, m, n, p)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Sub(a, b) => vec![(*a, gd.to_vec()), (*b, gd.iter().map(|&x| -x).collect())],
            Op::AddRow(a, bias) => {
                let c = g.cols();
                let mut db = vec![S::zero(); c];
                for row in gd.chunks(c) {
                    for (acc, &x) in db.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                vec![(*a, gd.to_vec()), (*bias, db)]
            }
            Op::Mul(a, b) => {
                let da = zip_with(gd, self.value(*b).data(), |x, y| x * y);
                let db = zip_with(gd, self.value(*a).data(), |x, y| x * y);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, f) => vec![(*a, gd.iter().map(|&x| x * *f).collect())],
            Op::Transpose(a) => {
                let (r, c) = g.dims2()?;
                vec![(*a, transpose_raw(gd, r, c))]
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, dp));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    res.push((p, gd[offset..offset + len].to_vec()));
                    offset += len;
                }
                res
            }
            Op::GatherRows(a, indices) => {
                let c = g.cols();
                let mut da = vec![S::zero(); self.value(*a).len()];
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += gd[k * c + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims("slice_cols", *a)?;
                let w = g.cols();
                let mut da = vec![S::zero(); r * c];
                for row in 0..r {
                    da[row * c + start..row * c + start + w].copy_from_slice(&gd[row * w..(row + 1) * w]);
                }
                vec![(*a, da)]
            }
            Op::MeanRows(a) => {
                let (r, _) = self.dims("mean_rows", *a)?;
                let inv = S::one() / S::lit(r as f64);
                let mut da = Vec::with_capacity(self.value(*a).len());
                for _ in 0..r {
                    da.extend(gd.iter().map(|&x| x * inv));
                }
                vec![(*a, da)]
            }
            Op::SumAll(a) => vec![(*a, vec![gd[0]; self.value(*a).len()])],
            Op::Gelu(a) => {
                let da = zip_with(gd, self.value(*a).data(), |x, v| x * gelu_grad(v));
                vec![(*a, da)]
            }
            Op::Dropout(a, mask) => vec![(*a, zip_with(gd, mask, |x, m| x * m))],
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let c = g.cols();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(gd.chunks(c)) {
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    da.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                vec![(*a, da)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gv = self.value(*gain).data();
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let mut dx = Vec::with_capacity(gd.len());
                let inv_d = S::one() / S::lit(d as f64);
                for ((gr, xr), &istd) in gd.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mut sum_dxh = S::zero();
                    let mut sum_dxh_xh = S::zero();
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx.push(istd * (dxh - inv_d * sum_dxh - xr[j] * inv_d * sum_dxh_xh));
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let n = labels.len();
                let scale = gd[0] / S::lit(n as f64);
                let mut dl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * c + y] -= S::one();
                }
                dl.iter_mut().for_each(|x| *x *= scale);
                vec![(*logits, dl)]
            }
        };
        Ok(out)
    }
}

fn zip_with<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_into<S: Scalar>(row: &[S], out: &mut Vec<S>) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let start = out.len();
    let mut sum = S::zero();
    for &v in row {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= sum;
    }
}

/// Row-wise softmax on a plain slice (no tape).
pub fn softmax_slice<S: Scalar>(row: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(row.len());
    softmax_into(row, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Sums `out ⊙ w` for a fixed random `w`, so every output entry gets a
    /// distinct upstream weight.
    fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
        let (r, c) = tape.value(out).dims2().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(&mut rng, r, c));
        let prod = tape.mul(out, w).unwrap();
        tape.sum_all(prod).unwrap()
    }

    fn assert_gradcheck(report: GradCheck, tol: f64) {
        assert!(
            report.max_rel_error < tol,
            "gradient check failed: {report:?}"
        );
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::<f64>::new();
        let i3 = tape.constant(Tensor::identity(3));
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let y = tape.matmul(i3, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.zeros(2, 3);
        let b = tape.zeros(2, 3);
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[&[0.7, 0.7, 0.7], &[0.0, 2f64.ln(), f64::NEG_INFINITY]]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v.at(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((v.at(1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.at(1, 2), 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0, f64::NAN]));
        assert!(matches!(tape.softmax_rows(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_degenerate_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[&[3.0, 3.0, 3.0, 3.0]]).unwrap());
        let g = tape.constant(Tensor::full(&[1, 4], 1.0));
        let b = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::row_vector(vec![1.0, -1.0]));
        let g = tape.constant(Tensor::full(&[1, 2], 1.0));
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::BackwardTwice));
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_masks_reproduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&mut rng, 4, 6));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);

        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::full(&[8, 8], 1.0));
            let y = tape.dropout(x, 0.5, &mut rng).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let l = tape.cross_entropy_with_logits(logits, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let logits = tape.constant(Tensor::row_vector(vec![80.0, 0.0, 0.0]));
        let l = tape.cross_entropy_with_logits(logits, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-30);

        assert!(matches!(
            tape.cross_entropy_with_logits(logits, &[3]),
            Err(TensorError::Index { .. })
        ));
    }

    // Finite-difference checks, one per differentiable op.

    #[test]
    fn gradcheck_matmul() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![random(&mut rng, 4, 5), random(&mut rng, 5, 3)];
            let report = check_gradients(&inputs, 1e-6, |tape, v| {
                let c = tape.matmul(v[0], v[1])?;
                Ok(weighted_sum(tape, c, seed))
            })
            .unwrap();
            assert_gradcheck(report, 1e-6);
        }
    }

    #[test]
    fn gradcheck_softmax() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![random(&mut rng, 3, 5).map(|x| 3.0 * x)];
            let report = check_gradients(&inputs, 1e-6, |tape, v| {
                let s = tape.softmax_rows(v[0])?;
                Ok(weighted_sum(tape, s, seed + 100))
            })
            .unwrap();
            assert_gradcheck(report, 1e-6);
        }
    }

    #[test]
    fn gradcheck_layer_norm() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![random(&mut rng, 3, 6), random(&mut rng, 1, 6), random(&mut rng, 1, 6)];
            let report = check_gradients(&inputs, 1e-6, |tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
                Ok(weighted_sum(tape, y, seed + 200))
            })
            .unwrap();
            assert_gradcheck(report, 1e-5);
        }
    }

    #[test]
    fn gradcheck_elementwise_and_structural_ops() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                random(&mut rng, 3, 4),
                random(&mut rng, 3, 4),
                random(&mut rng, 1, 4),
                random(&mut rng, 3, 2),
            ];
            let report = check_gradients(&inputs, 1e-6, |tape, v| {
                let a = tape.add(v[0], v[1])?;
                let m = tape.mul(a, v[1])?;
                let s = tape.sub(m, v[0])?;
                let s = tape.scale(s, 0.7)?;
                let r = tape.add_row(s, v[2])?;
                let g = tape.gelu(r)?;
                let t = tape.transpose(g)?;
                let t = tape.transpose(t)?;
                let cat = tape.concat_cols(&[t, v[3]])?;
                let sl = tape.slice_cols(cat, 1, 4)?;
                let stacked = tape.concat_rows(&[sl, sl])?;
                let gathered = tape.gather_rows(stacked, &[0, 0, 5, 2])?;
                let mean = tape.mean_rows(gathered)?;
                let both = tape.concat_rows(&[mean, gathered])?;
                Ok(weighted_sum(tape, both, seed + 300))
            })
            .unwrap();
            assert_gradcheck(report, 1e-6);
        }
    }

    #[test]
    fn gradcheck_cross_entropy() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![random(&mut rng, 5, 3).map(|x| 2.0 * x)];
            let labels: Vec<usize> = (0..5).map(|i| (i + seed as usize) % 3).collect();
            let report = check_gradients(&inputs, 1e-6, |tape, v| tape.cross_entropy_with_logits(v[0], &labels)).unwrap();
            assert_gradcheck(report, 1e-6);
        }
    }

    #[test]
    fn gradcheck_fixed_dropout_mask() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![random(&mut rng, 4, 4)];
            let report = check_gradients(&inputs, 1e-6, |tape, v| {
                // reseeding inside the closure keeps the mask fixed across perturbations
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                let y = tape.dropout(v[0], 0.3, &mut mask_rng)?;
                Ok(weighted_sum(tape, y, seed + 400))
            })
            .unwrap();
            assert_gradcheck(report, 1e-6);
        }
    }
}
