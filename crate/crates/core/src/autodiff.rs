//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Vectors are `1×n` rows and
//! scalars are `1×1`. Nodes are appended in evaluation order, so a single
//! reverse sweep over the node list is a valid topological order for the
//! backward pass.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, Axis, Zip};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Array2<f64>,
    },
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

/// An append-only computation record. Leaves may borrow their value, which
/// keeps parameter binding allocation-free.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A leaf that receives gradient.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A borrowed leaf, typically a model parameter.
    pub fn borrowed(&mut self, value: &'a Array2<f64>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push_op(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(b).0, 1);
        let out = self.value(a) + self.value(b);
        self.push_op(out, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies `a` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a) * k;
        self.push_op(out, Op::MulScalar(a, s), &[a, s])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push_op(out, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Scales every row to unit Euclidean norm. Rows must be nonzero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut out = xv.clone();
        for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
            row /= *n;
        }
        self.push_op(out, Op::NormalizeRows { x, norms }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push_op(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push_op(out, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push_op(out, Op::SliceCols(a, start), &[a])
    }

    /// Negative log-softmax of `target` for a `1×k` logit row; result is `1×1`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let probs = softmax_rows(self.value(logits));
        let lv = self.value(logits);
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[[0, target]];
        self.push_op(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        )
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            out += self.value(*p);
        }
        self.push_op(out, Op::Sum(parts.to_vec()), parts)
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::MulScalar(a, sv) => {
                    if self.requires_grad(*sv) {
                        let gs = (&g * self.value(*a)).sum();
                        accumulate(&mut grads, *sv, Array2::from_elem((1, 1), gs));
                    }
                    if self.requires_grad(*a) {
                        let k = self.scalar(*sv);
                        accumulate(&mut grads, *a, g * k);
                    }
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &**out),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(out.rows()) {
                        let dotp = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &y| *gv = y * (*gv - dotp));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.requires_grad(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.requires_grad(*beta) {
                        accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.requires_grad(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let cols = dxhat.ncols() as f64;
                        let mut gx = Array2::zeros(dxhat.dim());
                        for r in 0..dxhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let k = inv_std[r] / cols;
                            for c in 0..dxhat.ncols() {
                                gx[[r, c]] = k * (cols * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let mut gx = g;
                    for ((mut grow, yrow), n) in
                        gx.rows_mut().into_iter().zip(out.rows()).zip(norms)
                    {
                        let dotp = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &y| *gv = (*gv - y * dotp) / n);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        if self.requires_grad(*p) {
                            let gp = g.slice(s![start..start + rows, ..]).to_owned();
                            accumulate(&mut grads, *p, gp);
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.shape(*p).1;
                        if self.requires_grad(*p) {
                            let gp = g.slice(s![.., start..start + cols]).to_owned();
                            accumulate(&mut grads, *p, gp);
                        }
                        start += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    gl[[0, *target]] -= 1.0;
                    accumulate(&mut grads, *logits, gl * g[[0, 0]]);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        if self.requires_grad(*p) {
                            accumulate(&mut grads, *p, g.clone());
                        }
                    }
                }
            }
        }
        Grads(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax with max subtraction. Entries equal to `-inf` receive
/// probability exactly zero.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}
