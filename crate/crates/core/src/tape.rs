//! Reverse-mode gradient tape over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and accumulates adjoints only along paths
//! that reach a node created with [`Tape::param`], so frozen weights bound
//! with [`Tape::constant`] cost nothing in the backward pass.
//!
//! All values are 2-D; vectors are carried as `1 × n` rows and scalars as
//! `1 × 1`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{log_sum_exp, sigmoid, softplus, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One mined anchor/positive/negative index triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Softplus(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64>, eps: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row { x: Var, index: usize },
    Element { x: Var, index: usize },
    Dot(Var, Var),
    Sum(Var),
    CrossEntropySum { logits: Var, labels: Vec<usize>, probs: Tensor },
    TripletSum { features: Var, triplets: Vec<Triplet>, active: Vec<bool> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through a trainable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros of the right shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .map(|g| g.clone().reshape(shape.to_vec()).expect("gradient shape"))
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn check_row(&self, x: Var, r: Var) -> Result<(usize, usize)> {
        let (n, m) = self.dims(x);
        let rv = self.value(r);
        if rv.numel() != m {
            return shape_err(format!("row broadcast of {} entries onto {n}x{m}", rv.numel()));
        }
        Ok((n, m))
    }

    /// Adds the row vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, m) = self.check_row(x, r)?;
        let (xv, rv) = (self.value(x), self.value(r));
        let value = Tensor::from_fn(n, m, |i, j| xv.get(i, j) + rv.data()[j]);
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(value, Op::AddRow(x, r), rg))
    }

    /// Multiplies every row of `x` elementwise by the row vector `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, m) = self.check_row(x, r)?;
        let (xv, rv) = (self.value(x), self.value(r));
        let value = Tensor::from_fn(n, m, |i, j| xv.get(i, j) * rv.data()[j]);
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(value, Op::MulRow(x, r), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddConst(x), rg)
    }

    /// `x * s` where `s` is a `1 × 1` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("mul_scalar expects a 1x1 scalar node");
        }
        let c = self.scalar(s);
        let value = self.value(x).scale(c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(value, Op::Softplus(x), rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / v);
        let rg = self.rg(x);
        self.push(value, Op::Recip(x), rg)
    }

    /// Row-wise stabilized softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = xv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let value = Tensor::matrix(n, m, data).expect("softmax shape");
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Normalizes each row to zero mean and unit (biased) variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(n * m);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            data.extend(row.iter().map(|v| (v - mean) * r));
        }
        let value = Tensor::matrix(n, m, data).expect("layer norm shape");
        let rg = self.rg(x);
        self.push(value, Op::LayerNormRows { x, inv_std }, rg)
    }

    /// `x_i / (‖x_i‖₂ + eps)` for every row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(n * m);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            data.extend(row.iter().map(|v| v / (norm + eps)));
        }
        let value = Tensor::matrix(n, m, data).expect("normalize shape");
        let rg = self.rg(x);
        self.push(value, Op::L2NormRows { x, norms, eps }, rg)
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        if start >= end || end > m {
            return shape_err(format!("column slice {start}..{end} of width {m}"));
        }
        let xv = self.value(x);
        let value = Tensor::from_fn(n, end - start, |i, j| xv.get(i, start + j));
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero parts");
        };
        let n = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != n {
                return shape_err(format!("concat_cols of {r} rows onto {n}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(n, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero parts");
        };
        let m = self.dims(first).1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != m {
                return shape_err(format!("concat_rows of width {c} onto {m}"));
            }
            n += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(n, m, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, _) = self.dims(x);
        if index >= n {
            return Err(Error::Index(format!("row {index} of {n}")));
        }
        let value = Tensor::row_vector(self.value(x).row(index).to_vec());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Row { x, index }, rg))
    }

    /// Flat element `index` as a `1 × 1` node.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let numel = self.value(x).numel();
        if index >= numel {
            return Err(Error::Index(format!("element {index} of {numel}")));
        }
        let value = Tensor::row_vector(vec![self.value(x).data()[index]]);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Element { x, index }, rg))
    }

    /// Inner product of the flattened entries of `a` and `b`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return shape_err(format!("dot of {} and {} entries", av.numel(), bv.numel()));
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::row_vector(vec![s]), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::row_vector(vec![s]), Op::Sum(x), rg)
    }

    /// `Σ_b −log softmax(logits_b)[labels_b]` over the rows of `logits`.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return shape_err(format!("{} labels for {n} logit rows", labels.len()));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index(format!("label {y} with {c} classes")));
            }
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::matrix(n, c, probs)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::row_vector(vec![total]),
            Op::CrossEntropySum {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ max{0, m + ‖f_a − f_p‖ − ‖f_a − f_n‖}` over the given triplets of
    /// feature rows.
    pub fn triplet_sum(&mut self, features: Var, triplets: &[Triplet], margin: f64) -> Result<Var> {
        let fv = self.value(features);
        let n = fv.rows();
        let mut total = 0.0;
        let mut active = Vec::with_capacity(triplets.len());
        for t in triplets {
            if t.anchor >= n || t.positive >= n || t.negative >= n {
                return Err(Error::Index(format!("triplet {t:?} in batch of {n}")));
            }
            let dp = row_distance(fv, t.anchor, t.positive);
            let dn = row_distance(fv, t.anchor, t.negative);
            let h = margin + dp - dn;
            active.push(h > 0.0);
            if h > 0.0 {
                total += h;
            }
        }
        let rg = self.rg(features);
        Ok(self.push(
            Tensor::row_vector(vec![total]),
            Op::TripletSum {
                features,
                triplets: triplets.to_vec(),
                active,
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&[1, 1], 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let gb = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut grads, *a, gb);
                    }
                    if self.rg(*b) {
                        let ga = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&mut grads, *b, ga);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.zip_with(self.value(*b), |x, y| x * y)?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.zip_with(self.value(*a), |x, y| x * y)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, r) => {
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                    if self.rg(*r) {
                        let gr = column_sums(&g);
                        accumulate(&mut grads, *r, gr);
                    }
                }
                Op::MulRow(x, r) => {
                    let (n, m) = (g.rows(), g.cols());
                    let rv = self.value(*r);
                    if self.rg(*x) {
                        let gx = Tensor::from_fn(n, m, |i, j| g.get(i, j) * rv.data()[j]);
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.rg(*r) {
                        let xv = self.value(*x);
                        let mut gr = vec![0.0; m];
                        for i in 0..n {
                            for (j, acc) in gr.iter_mut().enumerate() {
                                *acc += g.get(i, j) * xv.get(i, j);
                            }
                        }
                        accumulate(&mut grads, *r, Tensor::row_vector(gr));
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.scale(*c)),
                Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::MulScalar(x, s) => {
                    let c = self.scalar(*s);
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g.scale(c));
                    }
                    if self.rg(*s) {
                        let gs: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(a, b)| a * b)
                            .sum();
                        accumulate(&mut grads, *s, Tensor::row_vector(vec![gs]));
                    }
                }
                Op::Transpose(x) => accumulate(&mut grads, *x, g.transpose()),
                Op::Gelu(x) => {
                    let gx = g.zip_with(self.value(*x), |gy, v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gy * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let gx = g.zip_with(self.value(*x), |gy, v| gy * sigmoid(v))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Recip(x) => {
                    let gx = g.zip_with(self.value(*x), |gy, v| -gy / (v * v))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut gx = Vec::with_capacity(n * m);
                    for i in 0..n {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(n, m, gx)?);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &node.value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut gx = Vec::with_capacity(n * m);
                    for (i, &r) in inv_std.iter().enumerate() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let mean_g = gr.iter().sum::<f64>() / m as f64;
                        let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        gx.extend(
                            yr.iter()
                                .zip(gr)
                                .map(|(yv, gv)| r * (gv - mean_g - yv * mean_gy)),
                        );
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(n, m, gx)?);
                }
                Op::L2NormRows { x, norms, eps } => {
                    let xv = self.value(*x);
                    let (n, m) = (xv.rows(), xv.cols());
                    let mut gx = Vec::with_capacity(n * m);
                    for (i, &norm) in norms.iter().enumerate() {
                        let (xr, gr) = (xv.row(i), g.row(i));
                        let s = norm + eps;
                        if norm == 0.0 {
                            gx.extend(gr.iter().map(|gv| gv / s));
                            continue;
                        }
                        let gdotx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let k = gdotx / (s * s * norm);
                        gx.extend(xr.iter().zip(gr).map(|(xv, gv)| gv / s - k * xv));
                    }
                    accumulate(&mut grads, *x, Tensor::matrix(n, m, gx)?);
                }
                Op::SliceCols { x, start } => {
                    let (n, m) = self.dims(*x);
                    let w = g.cols();
                    let gx = Tensor::from_fn(n, m, |i, j| {
                        if j >= *start && j < start + w {
                            g.get(i, j - start)
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (n, w) = self.dims(p);
                        if self.rg(p) {
                            let gp = Tensor::from_fn(n, w, |i, j| g.get(i, offset + j));
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let m = g.cols();
                    for &p in parts {
                        let (r, _) = self.dims(p);
                        if self.rg(p) {
                            let data = g.data()[offset * m..(offset + r) * m].to_vec();
                            accumulate(&mut grads, p, Tensor::matrix(r, m, data)?);
                        }
                        offset += r;
                    }
                }
                Op::Row { x, index } => {
                    let (n, m) = self.dims(*x);
                    let mut gx = Tensor::zeros(&[n, m]);
                    gx.data_mut()[index * m..(index + 1) * m].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Element { x, index } => {
                    let (n, m) = self.dims(*x);
                    let mut gx = Tensor::zeros(&[n, m]);
                    gx.data_mut()[*index] = g.data()[0];
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dot(a, b) => {
                    let gs = g.data()[0];
                    if self.rg(*a) {
                        let (n, m) = self.dims(*a);
                        let ga = Tensor::matrix(
                            n,
                            m,
                            self.value(*b).data().iter().map(|v| v * gs).collect(),
                        )?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let (n, m) = self.dims(*b);
                        let gb = Tensor::matrix(
                            n,
                            m,
                            self.value(*a).data().iter().map(|v| v * gs).collect(),
                        )?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Sum(x) => {
                    let (n, m) = self.dims(*x);
                    accumulate(&mut grads, *x, Tensor::filled(&[n, m], g.data()[0]));
                }
                Op::CrossEntropySum {
                    logits,
                    labels,
                    probs,
                } => {
                    let gs = g.data()[0];
                    let mut gl = probs.scale(gs);
                    for (i, &y) in labels.iter().enumerate() {
                        let v = gl.get(i, y);
                        gl.set(i, y, v - gs);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::TripletSum {
                    features,
                    triplets,
                    active,
                } => {
                    let gs = g.data()[0];
                    let fv = self.value(*features);
                    let (n, m) = (fv.rows(), fv.cols());
                    let mut gf = Tensor::zeros(&[n, m]);
                    for (t, &on) in triplets.iter().zip(active) {
                        if !on {
                            continue;
                        }
                        // d/d f_a of ‖f_a − f_p‖ is the unit direction; zero at coincidence.
                        let up = unit_diff(fv, t.anchor, t.positive);
                        let un = unit_diff(fv, t.anchor, t.negative);
                        let gd = gf.data_mut();
                        for j in 0..m {
                            gd[t.anchor * m + j] += gs * (up[j] - un[j]);
                            gd[t.positive * m + j] -= gs * up[j];
                            gd[t.negative * m + j] += gs * un[j];
                        }
                    }
                    accumulate(&mut grads, *features, gf);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let (n, m) = (g.rows(), g.cols());
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (j, acc) in out.iter_mut().enumerate() {
            *acc += g.get(i, j);
        }
    }
    Tensor::row_vector(out)
}

pub(crate) fn row_distance(t: &Tensor, a: usize, b: usize) -> f64 {
    t.row(a)
        .iter()
        .zip(t.row(b))
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn unit_diff(t: &Tensor, a: usize, b: usize) -> Vec<f64> {
    let d = row_distance(t, a, b);
    if d == 0.0 {
        return vec![0.0; t.cols()];
    }
    t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y) / d).collect()
}
