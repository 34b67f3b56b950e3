//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Values are always
//! two-dimensional (`rows x cols`); scalars are `1 x 1`. Calling
//! [`Graph::backward`] on a scalar node returns the adjoint of every node that
//! depends on a gradient-carrying leaf.

use ndarray::{s, Array1, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Axpby(Var, f64, Var, f64),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    /// Keeps the elementwise derivative computed on the forward pass.
    Mish(Var, Option<Matrix>),
    Tanh(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    RowSlice(Var, usize, usize),
    Reshape(Var),
    RowSum(Var),
    Mean(Var),
    Min(Var, Var),
    LogSumExpRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Computation graph; nodes are appended in evaluation order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Beyond this input, `tanh(softplus(x))` is 1 to double precision.
const MISH_LINEAR: f64 = 40.0;

/// `x tanh(softplus(x))`, using `tanh(ln(1 + e^x)) = n / (n + 2)` with
/// `n = e^x (e^x + 2)` so only one exponential is needed.
pub fn mish(x: f64) -> f64 {
    mish_with_grad(x).0
}

/// `(mish(x), mish'(x))` from a single exponential.
fn mish_with_grad(x: f64) -> (f64, f64) {
    if x > MISH_LINEAR {
        return (x, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    let w = n / d;
    // d/dx [n / (n + 2)] = 2 n' / (n + 2)^2 with n' = 2 e (e + 1).
    (x * w, w + x * 4.0 * e * (e + 1.0) / (d * d))
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose adjoint is accumulated by `backward`.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `x + row`, broadcasting a `1 x m` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    /// `W x + b` for row-major batches: `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `ca * a + cb * b`.
    pub fn axpby(&mut self, a: Var, ca: f64, b: Var, cb: f64) -> Var {
        let mut value = self.value(a) * ca;
        value.scaled_add(cb, self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Axpby(a, ca, b, cb), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        assert_eq!(self.value(a).dim(), c.dim(), "mul_const shape mismatch");
        let value = self.value(a) * &c;
        let ng = self.needs(a);
        self.push(value, Op::MulConst(a, c), ng)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        let ng = self.needs(a);
        let x = self.value(a);
        if !ng {
            let value = x.mapv(mish);
            return self.push(value, Op::Mish(a, None), ng);
        }
        let mut value = Matrix::zeros(x.raw_dim());
        let mut grad = Matrix::zeros(x.raw_dim());
        Zip::from(&mut value).and(&mut grad).and(x).for_each(|v, d, &xi| {
            (*v, *d) = mish_with_grad(xi);
        });
        self.push(value, Op::Mish(a, Some(grad)), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let ng = self.needs(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows `start..end`.
    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::RowSlice(a, start, end), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape changes element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Matrix::from_shape_vec((rows, cols), flat).expect("reshape");
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Sum over columns: `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Mean over every element: `-> 1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_elem((1, 1), m.sum() / m.len() as f64);
        let ng = self.needs(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x <= y { x } else { y });
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Min(a, b), ng)
    }

    /// Overflow-safe `log(sum(exp(row)))` per row: `n x m -> n x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |row| logsumexp(row.iter().copied()))
            .insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(value, Op::LogSumExpRows(a), ng)
    }

    /// Batch normalization over rows with batch statistics.
    /// Returns the output and the `(mean, biased variance)` of the batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Array1<f64>, Array1<f64>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.sum_axis(Axis(0)) / n;
        let centered = xv - &mean;
        let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let xhat = centered * &inv_std;
        let out = self.bn_output(&xhat, gamma, beta);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            ng,
        );
        (v, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Array1<f64>, var: &Array1<f64>) -> Var {
        let inv_std = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let xhat = (self.value(x) - mean) * &inv_std;
        let out = self.bn_output(&xhat, gamma, beta);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            ng,
        )
    }

    fn bn_output(&self, xhat: &Matrix, gamma: Var, beta: Var) -> Matrix {
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        xhat * &g + &b
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Axpby(a, ca, b, cb) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * *ca);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * *cb);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g * c),
                Op::Mish(a, grad) => {
                    let ga = &g * grad.as_ref().expect("derivative kept for gradient-carrying mish");
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&gi, &y| gi * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|&gi, &x| 2.0 * gi * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gi, &x| if x < *lo || x > *hi { 0.0 } else { gi });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.slice(s![.., col..col + width]).to_owned());
                        }
                        col += width;
                    }
                }
                Op::RowSlice(a, start, end) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.dim());
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    accumulate(&mut grads, *a, Matrix::from_shape_vec(dim, flat).expect("reshape grad"));
                }
                Op::RowSum(a) => {
                    let cols = self.value(*a).ncols();
                    let ga = g.broadcast((g.nrows(), cols)).expect("row_sum grad").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let ga = Matrix::from_elem(src.dim(), g[[0, 0]] / src.len() as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let ga = Zip::from(&g)
                            .and(va)
                            .and(vb)
                            .map_collect(|&gi, &x, &y| if x <= y { gi } else { 0.0 });
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = Zip::from(&g)
                            .and(va)
                            .and(vb)
                            .map_collect(|&gi, &x, &y| if x <= y { 0.0 } else { gi });
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::LogSumExpRows(a) => {
                    // d lse / d x_k = softmax_k
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.dim());
                    for (r, (row, mut out)) in src.outer_iter().zip(ga.outer_iter_mut()).enumerate() {
                        let lse = node.value[[r, 0]];
                        let gr = g[[r, 0]];
                        for (o, &x) in out.iter_mut().zip(row.iter()) {
                            *o = gr * (x - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.needs(*x) {
                        let gamma_row = self.value(*gamma).row(0).to_owned();
                        let dxhat = &g * &gamma_row;
                        let gx = if *batch_stats {
                            let n = g.nrows() as f64;
                            let sum_d = dxhat.sum_axis(Axis(0));
                            let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                            let mut gx = dxhat * n - &sum_d - &(xhat * &sum_dx);
                            gx *= &(inv_std / n);
                            gx
                        } else {
                            dxhat * inv_std
                        };
                        accumulate(&mut grads, *x, gx);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// `log(sum(exp(x)))` shifted by the maximum.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around every element of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let v = g.variable(m.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, &eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(err < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Matrix {
        array![[0.3, -1.2, 0.7], [2.1, 0.05, -0.4], [-0.9, 1.5, 0.2], [0.0, -0.3, 1.1]]
    }

    #[test]
    fn elementwise_ops_have_correct_gradients() {
        check(sample(), |g, x| {
            let m = g.mish(x);
            let t = g.tanh(m);
            let s = g.square(t);
            g.mean(s)
        });
        check(sample(), |g, x| {
            let c = g.constant(sample().mapv(|v| v * 0.5 + 0.1));
            let p = g.mul(x, c);
            let q = g.axpby(p, 0.7, x, -1.3);
            let r = g.sub(q, c);
            let a = g.add(r, x);
            let sq = g.square(a);
            g.mean(sq)
        });
    }

    #[test]
    fn matmul_and_affine_gradients() {
        let w = array![[0.2, -0.5], [1.0, 0.3], [-0.7, 0.8]];
        check(sample(), |g, x| {
            let wv = g.constant(w.clone());
            let b = g.constant(array![[0.1, -0.2]]);
            let y = g.affine(x, wv, b);
            let m = g.mish(y);
            let sq = g.square(m);
            g.mean(sq)
        });
        check(w.clone(), |g, wv| {
            let x = g.constant(sample());
            let y = g.matmul(x, wv);
            let t = g.tanh(y);
            g.mean(t)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        check(sample(), |g, x| {
            let top = g.row_slice(x, 1, 3);
            let r = g.reshape(top, 3, 2);
            let l = g.logsumexp_rows(r);
            let c = g.concat_cols(&[l, l]);
            let rs = g.row_sum(c);
            let sq = g.square(rs);
            g.mean(sq)
        });
        check(sample(), |g, x| {
            let other = g.constant(sample().mapv(|v| 0.5 - v));
            let m = g.min(x, other);
            let c = g.clamp(m, -0.8, 0.9);
            let sq = g.square(c);
            g.mean(sq)
        });
    }

    #[test]
    fn batch_norm_gradients_in_both_modes() {
        check(sample(), |g, x| {
            let gamma = g.constant(array![[1.5, 0.5, -0.7]]);
            let beta = g.constant(array![[0.1, 0.2, 0.3]]);
            let (y, _, _) = g.batch_norm_train(x, gamma, beta);
            let m = g.mish(y);
            let w = g.constant(array![[0.3], [-1.1], [0.6]]);
            let out = g.matmul(m, w);
            let sq = g.square(out);
            g.mean(sq)
        });
        check(array![[1.5, 0.5, -0.7]], |g, gamma| {
            let x = g.constant(sample());
            let beta = g.constant(array![[0.1, 0.2, 0.3]]);
            let (y, _, _) = g.batch_norm_train(x, gamma, beta);
            let m = g.tanh(y);
            g.mean(m)
        });
        check(sample(), |g, x| {
            let gamma = g.constant(array![[1.5, 0.5, -0.7]]);
            let beta = g.constant(array![[0.1, 0.2, 0.3]]);
            let y = g.batch_norm_eval(x, gamma, beta, &array![0.2, -0.1, 0.4], &array![1.3, 0.7, 2.0]);
            let sq = g.square(y);
            g.mean(sq)
        });
    }

    #[test]
    fn batch_norm_normalizes_batch() {
        let mut g = Graph::new();
        let x = g.constant(sample());
        let gamma = g.constant(Matrix::ones((1, 3)));
        let beta = g.constant(Matrix::zeros((1, 3)));
        let (y, mean, _) = g.batch_norm_train(x, gamma, beta);
        for col in g.value(y).columns() {
            assert!(col.sum().abs() < 1e-12);
        }
        assert!((mean[0] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        assert!((logsumexp([1000.0, 1000.0].into_iter()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((logsumexp([-1000.0; 10].into_iter()) - (-1000.0 + 10f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(sample());
        let v = g.variable(sample());
        let p = g.mul(c, v);
        let m = g.mean(p);
        let grads = g.backward(m);
        assert!(grads.get(c).is_none());
        assert!(grads.get(v).is_some());
    }
}
