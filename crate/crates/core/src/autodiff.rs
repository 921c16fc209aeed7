//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every forward pass builds a fresh [`Tape`]; each tensor op appends a node
//! holding its value and the ids of its inputs. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node, so parameter
//! gradients fall out of the same graph the loss was computed on.
//!
//! All values are `Array2<f64>`; vectors are `[1 x d]` or `[n x 1]` and
//! scalars are `[1 x 1]`. The op set is exactly what the model and its losses
//! need — each gradient formula is checked against central finite differences
//! in the tests below.

use std::cell::RefCell;

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Constant or parameter leaf. Gradients are only reported for leaves
    /// created with `param`.
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    /// `[n x d] + [1 x d]` row broadcast.
    AddRow(Var, Var),
    /// `[n x d] * [n x 1]` column broadcast.
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    /// Elementwise `x^p` for constant `p`; inputs must stay positive when
    /// `p` is fractional.
    PowScalar(Var, f64),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    /// Subgradient is 1 inside `[lo, hi]`, 0 outside.
    Clamp(Var, f64, f64),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    /// `[n x d] -> [n x 1]`.
    RowSum(Var),
    /// `[n x d] -> [1 x d]`; gradient routes to the first row attaining the max.
    ColMax(Var),
    /// `[n x d] -> [1 x d]`.
    ColMean(Var),
    /// `-> [1 x 1]`.
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Row-wise layer norm with affine parameters `gamma`, `beta` (`[1 x d]`).
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Growable op graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of a node's value.
    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.nodes.borrow();
        let d = n[v.0].value.dim();
        (d.0, d.1)
    }

    /// Scalar value of a `[1 x 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.nodes.borrow();
        debug_assert_eq!(n[v.0].value.dim(), (1, 1));
        n[v.0].value[[0, 0]]
    }

    fn push(&self, op: Op, value: Array2<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf { requires_grad: false }, value)
    }

    pub fn scalar_constant(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf whose gradient is retained by `backward`.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf { requires_grad: true }, value)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.with(a, |x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.with(a, |x| x * c);
        self.push(Op::MulScalar(a, c), v)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| x.dot(y));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.t().to_owned());
        self.push(Op::Transpose(a), v)
    }

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let v = self.with2(a, row, |x, r| {
            debug_assert_eq!(r.nrows(), 1);
            x + &r.row(0)
        });
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let v = self.with2(a, col, |x, c| {
            debug_assert_eq!(c.ncols(), 1);
            x * c
        });
        self.push(Op::MulCol(a, col), v)
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.max(0.0)));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(|e| 1.0 / (1.0 + (-e).exp())));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(f64::ln));
        self.push(Op::Ln(a), v)
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(f64::exp));
        self.push(Op::Exp(a), v)
    }

    pub fn pow_scalar(&self, a: Var, p: f64) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.powf(p)));
        self.push(Op::PowScalar(a, p), v)
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.mapv(f64::abs));
        self.push(Op::Abs(a), v)
    }

    pub fn maximum(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            let mut out = x.clone();
            out.zip_mut_with(y, |e, &o| *e = e.max(o));
            out
        });
        self.push(Op::Maximum(a, b), v)
    }

    pub fn minimum(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| {
            let mut out = x.clone();
            out.zip_mut_with(y, |e, &o| *e = e.min(o));
            out
        });
        self.push(Op::Minimum(a, b), v)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.with(a, |x| x.mapv(|e| e.clamp(lo, hi)));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn row_softmax(&self, a: Var) -> Var {
        let v = self.with(a, |x| row_softmax_values(x));
        self.push(Op::RowSoftmax(a), v)
    }

    pub fn row_log_softmax(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|e| (e - max).exp()).sum::<f64>().ln() + max;
                row.mapv_inplace(|e| e - lse);
            }
            out
        });
        self.push(Op::RowLogSoftmax(a), v)
    }

    pub fn row_sum(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            x.sum_axis(Axis(1)).insert_axis(Axis(1))
        });
        self.push(Op::RowSum(a), v)
    }

    pub fn col_max(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let mut out = Array2::zeros((1, x.ncols()));
            for j in 0..x.ncols() {
                out[[0, j]] = x.column(j).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            out
        });
        self.push(Op::ColMax(a), v)
    }

    pub fn col_mean(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            (x.sum_axis(Axis(0)) / x.nrows() as f64).insert_axis(Axis(0))
        });
        self.push(Op::ColMean(a), v)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.with(a, |x| Array2::from_elem((1, 1), x.sum()));
        self.push(Op::SumAll(a), v)
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let v = self.with(a, |x| {
            let mut out = Array2::zeros((indices.len(), x.ncols()));
            for (k, &i) in indices.iter().enumerate() {
                out.row_mut(k).assign(&x.row(i));
            }
            out
        });
        self.push(Op::GatherRows(a, indices.to_vec()), v)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.with(a, |x| x.slice(s![.., start..start + len]).to_owned());
        self.push(Op::SliceCols(a, start, len), v)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let mut out = Array2::zeros(xv.dim());
            for (i, row) in xv.rows().into_iter().enumerate() {
                let (xhat, _, _) = normalize_row(&row.to_owned(), eps);
                for j in 0..xv.ncols() {
                    out[[i, j]] = xhat[j] * g[[0, j]] + b[[0, j]];
                }
            }
            out
        };
        self.push(Op::LayerNorm { x, gamma, beta, eps }, v)
    }

    /// Backpropagate from `loss` (a `[1 x 1]` node). Returns gradients for
    /// every node; leaves created via [`Tape::constant`] report `None`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * &nodes[b.0].value);
                    accumulate(&mut grads, *b, &g * &nodes[a.0].value);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[b.0].value;
                    accumulate(&mut grads, *a, &g / bv);
                    let av = &nodes[a.0].value;
                    accumulate(&mut grads, *b, -(&g * av) / (bv * bv));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MulScalar(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Matmul(a, b) => {
                    let da = g.dot(&nodes[b.0].value.t());
                    let db = nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulCol(a, col) => {
                    let cv = &nodes[col.0].value;
                    accumulate(&mut grads, *a, &g * cv);
                    let av = &nodes[a.0].value;
                    let dc = (&g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *col, dc);
                }
                Op::Relu(a) => {
                    let mask = nodes[a.0].value.mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[i].value;
                    accumulate(&mut grads, *a, &g * &(y * &(1.0 - y)));
                }
                Op::Ln(a) => {
                    accumulate(&mut grads, *a, &g / &nodes[a.0].value);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, &g * &nodes[i].value);
                }
                Op::PowScalar(a, p) => {
                    let d = nodes[a.0].value.mapv(|e| p * e.powf(p - 1.0));
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Abs(a) => {
                    let sign = nodes[a.0].value.mapv(f64::signum);
                    accumulate(&mut grads, *a, &g * &sign);
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mut ga = Array2::zeros(g.dim());
                    let mut gb = Array2::zeros(g.dim());
                    for ((idx, &ge), (&ae, &be)) in
                        g.indexed_iter().zip(av.iter().zip(bv.iter()))
                    {
                        if ae >= be {
                            ga[idx] = ge;
                        } else {
                            gb[idx] = ge;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mut ga = Array2::zeros(g.dim());
                    let mut gb = Array2::zeros(g.dim());
                    for ((idx, &ge), (&ae, &be)) in
                        g.indexed_iter().zip(av.iter().zip(bv.iter()))
                    {
                        if ae <= be {
                            ga[idx] = ge;
                        } else {
                            gb[idx] = ge;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = nodes[a.0].value.mapv(|e| {
                        if e >= *lo && e <= *hi {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::RowSoftmax(a) => {
                    let y = &nodes[i].value;
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowLogSoftmax(a) => {
                    let y = &nodes[i].value; // log-probabilities
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gsum: f64 = (0..y.ncols()).map(|c| g[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSum(a) => {
                    let (n, d) = nodes[a.0].value.dim();
                    let mut da = Array2::zeros((n, d));
                    for r in 0..n {
                        for c in 0..d {
                            da[[r, c]] = g[[r, 0]];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ColMax(a) => {
                    let av = &nodes[a.0].value;
                    let mut da = Array2::zeros(av.dim());
                    for j in 0..av.ncols() {
                        let mut win = 0;
                        let mut best = f64::NEG_INFINITY;
                        for r in 0..av.nrows() {
                            if av[[r, j]] > best {
                                best = av[[r, j]];
                                win = r;
                            }
                        }
                        da[[win, j]] = g[[0, j]];
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ColMean(a) => {
                    let (n, d) = nodes[a.0].value.dim();
                    let mut da = Array2::zeros((n, d));
                    for r in 0..n {
                        for c in 0..d {
                            da[[r, c]] = g[[0, c]] / n as f64;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(nodes[a.0].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, indices) => {
                    let mut da = Array2::zeros(nodes[a.0].value.dim());
                    for (k, &idx) in indices.iter().enumerate() {
                        for c in 0..da.ncols() {
                            da[[idx, c]] += g[[k, c]];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, len) => {
                    let mut da = Array2::zeros(nodes[a.0].value.dim());
                    da.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = nodes[p.0].value.nrows();
                        let gp = g.slice(s![offset..offset + rows, ..]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = nodes[p.0].value.ncols();
                        let gp = g.slice(s![.., offset..offset + cols]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += cols;
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &nodes[x.0].value;
                    let gv = &nodes[gamma.0].value;
                    let (n, d) = xv.dim();
                    let mut dx = Array2::zeros((n, d));
                    let mut dgamma = Array2::zeros((1, d));
                    let mut dbeta = Array2::zeros((1, d));
                    for r in 0..n {
                        let row = xv.row(r).to_owned();
                        let (xhat, _, inv_std) = normalize_row(&row, *eps);
                        // h = dL/dxhat
                        let h: Vec<f64> = (0..d).map(|c| g[[r, c]] * gv[[0, c]]).collect();
                        let mean_h: f64 = h.iter().sum::<f64>() / d as f64;
                        let mean_hx: f64 =
                            h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx[[r, c]] = (h[c] - mean_h - xhat[c] * mean_hx) * inv_std;
                            dgamma[[0, c]] += g[[r, c]] * xhat[c];
                            dbeta[[0, c]] += g[[r, c]];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
            }
        }

        // Drop gradients of constant leaves so callers cannot mistake them
        // for parameter gradients.
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: false } = node.op {
                grads[i] = None;
            }
        }

        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Numerically stable softmax over each row, as plain values.
pub fn row_softmax_values(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|e| (e - max).exp());
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

fn normalize_row(row: &ndarray::Array1<f64>, eps: f64) -> (Vec<f64>, f64, f64) {
    let d = row.len() as f64;
    let mean = row.sum() / d;
    let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat = row.iter().map(|e| (e - mean) * inv_std).collect();
    (xhat, mean, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. each entry of the leaf that
    /// `build` turns into a param, compared against tape gradients.
    fn check_grad(
        input: &Array2<f64>,
        tol: f64,
        build: impl Fn(&Tape, Var) -> Var,
    ) {
        let tape = Tape::new();
        let x = tape.param(input.clone());
        let loss = build(&tape, x);
        let analytic = tape.backward(loss).get(x).expect("no gradient").clone();

        let eps = 1e-6;
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let mut plus = input.clone();
            plus[[r, c]] += eps;
            let mut minus = input.clone();
            minus[[r, c]] -= eps;
            let f = |m: Array2<f64>| {
                let t = Tape::new();
                let v = t.param(m);
                t.scalar(build(&t, v))
            };
            let fd = (f(plus) - f(minus)) / (2.0 * eps);
            let a = analytic[[r, c]];
            let denom = fd.abs().max(a.abs()).max(1.0);
            assert!(
                (fd - a).abs() / denom < tol,
                "grad mismatch at ({r},{c}): fd={fd} analytic={a}"
            );
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 3, 4);
        check_grad(&x, 1e-6, |t, v| {
            let w = t.constant(w.clone());
            let a = t.mul(t.add(v, w), t.sub(v, w));
            t.sum_all(a)
        });
        check_grad(&x, 1e-6, |t, v| {
            let s = t.sigmoid(v);
            t.sum_all(t.mul(s, s))
        });
        check_grad(&x, 1e-5, |t, v| {
            let r = t.relu(v);
            t.sum_all(t.mul_scalar(r, 2.0))
        });
        let pos = x.mapv(|e| e.abs() + 0.5);
        check_grad(&pos, 1e-6, |t, v| t.sum_all(t.ln(v)));
        check_grad(&pos, 1e-6, |t, v| t.sum_all(t.pow_scalar(v, 2.5)));
        check_grad(&x, 1e-6, |t, v| t.sum_all(t.exp(v)));
        check_grad(&pos, 1e-6, |t, v| {
            let w = t.constant(pos.clone() + 0.3);
            t.sum_all(t.div(v, w))
        });
    }

    #[test]
    fn grad_matmul_and_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 5);
        let row = rand_mat(&mut rng, 1, 5);
        let col = rand_mat(&mut rng, 3, 1).mapv(|e| e + 2.0);
        check_grad(&x, 1e-6, |t, v| {
            let w = t.constant(w.clone());
            let r = t.constant(row.clone());
            t.sum_all(t.add_row(t.matmul(v, w), r))
        });
        check_grad(&w, 1e-6, |t, v| {
            let x = t.constant(x.clone());
            t.sum_all(t.matmul(x, v))
        });
        check_grad(&row, 1e-6, |t, v| {
            let base = t.constant(rand_mat(&mut ChaCha8Rng::seed_from_u64(9), 3, 5));
            t.sum_all(t.add_row(base, v))
        });
        check_grad(&col, 1e-6, |t, v| {
            let base = t.constant(x.clone().slice(s![.., 0..1]).to_owned() + 3.0);
            let wide = t.constant(rand_mat(&mut ChaCha8Rng::seed_from_u64(10), 3, 4));
            let _ = base;
            t.sum_all(t.mul_col(wide, v))
        });
        check_grad(&x, 1e-6, |t, v| t.sum_all(t.transpose(v)));
    }

    #[test]
    fn grad_softmax_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 6);
        let pick = rand_mat(&mut rng, 4, 6);
        check_grad(&x, 1e-6, |t, v| {
            let p = t.constant(pick.clone());
            t.sum_all(t.mul(t.row_softmax(v), p))
        });
        check_grad(&x, 1e-6, |t, v| {
            let p = t.constant(pick.clone());
            t.sum_all(t.mul(t.row_log_softmax(v), p))
        });
    }

    #[test]
    fn grad_reductions_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 5, 3);
        let pick3 = rand_mat(&mut rng, 1, 3);
        check_grad(&x, 1e-6, |t, v| {
            let p = t.constant(pick3.clone());
            t.sum_all(t.mul(t.col_max(v), p))
        });
        check_grad(&x, 1e-6, |t, v| {
            let p = t.constant(pick3.clone());
            t.sum_all(t.mul(t.col_mean(v), p))
        });
        check_grad(&x, 1e-6, |t, v| {
            let p = t.constant(rand_mat(&mut ChaCha8Rng::seed_from_u64(11), 5, 1));
            t.sum_all(t.mul(t.row_sum(v), p))
        });
        check_grad(&x, 1e-6, |t, v| {
            let g = t.gather_rows(v, &[0, 2, 2, 4]);
            t.sum_all(t.mul(g, g))
        });
        check_grad(&x, 1e-6, |t, v| {
            let a = t.slice_cols(v, 1, 2);
            t.sum_all(t.mul(a, a))
        });
        check_grad(&x, 1e-6, |t, v| {
            let a = t.slice_cols(v, 0, 1);
            let b = t.slice_cols(v, 1, 2);
            let cat = t.concat_cols(&[a, b, a]);
            t.sum_all(t.mul(cat, cat))
        });
        check_grad(&x, 1e-6, |t, v| {
            let top = t.gather_rows(v, &[0, 1]);
            let cat = t.concat_rows(&[v, top]);
            t.sum_all(t.mul(cat, cat))
        });
    }

    #[test]
    fn grad_minmax_abs_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 3, 3);
        let y = rand_mat(&mut rng, 3, 3);
        check_grad(&x, 1e-5, |t, v| {
            let w = t.constant(y.clone());
            t.sum_all(t.maximum(v, w))
        });
        check_grad(&x, 1e-5, |t, v| {
            let w = t.constant(y.clone());
            t.sum_all(t.minimum(v, w))
        });
        check_grad(&x, 1e-5, |t, v| t.sum_all(t.abs(v)));
        // Keep entries away from the clamp boundary so FD is valid.
        let inside = x.mapv(|e| e * 0.4);
        check_grad(&inside, 1e-5, |t, v| {
            t.sum_all(t.mul(t.clamp(v, -0.5, 0.5), t.clamp(v, -0.5, 0.5)))
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 4, 8);
        let gamma = rand_mat(&mut rng, 1, 8).mapv(|e| e + 1.5);
        let beta = rand_mat(&mut rng, 1, 8);
        let pick = rand_mat(&mut rng, 4, 8);
        check_grad(&x, 1e-5, |t, v| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let p = t.constant(pick.clone());
            t.sum_all(t.mul(t.layer_norm(v, g, b, 1e-5), p))
        });
        check_grad(&gamma, 1e-5, |t, v| {
            let x = t.constant(x.clone());
            let b = t.constant(beta.clone());
            let p = t.constant(pick.clone());
            t.sum_all(t.mul(t.layer_norm(x, v, b, 1e-5), p))
        });
        check_grad(&beta, 1e-6, |t, v| {
            let x = t.constant(x.clone());
            let g = t.constant(gamma.clone());
            let p = t.constant(pick.clone());
            t.sum_all(t.mul(t.layer_norm(x, g, v, 1e-5), p))
        });
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let s = row_softmax_values(&x);
        for row in s.rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&e| e >= 0.0));
        }
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        // -1e9 on masked logits underflows to exactly 0 after exp.
        let x = array![[0.0, 0.0, -1e9]];
        let s = row_softmax_values(&x);
        assert_eq!(s[[0, 2]], 0.0);
        assert!((s[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.param(array![[2.0]]);
        let y = tape.mul(x, x); // x^2
        let z = tape.add(y, x); // x^2 + x -> dz/dx = 2x + 1 = 5
        let g = tape.backward(z);
        assert!((g.get(x).unwrap()[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn constants_report_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(array![[1.0]]);
        let c = tape.constant(array![[3.0]]);
        let loss = tape.mul(x, c);
        let g = tape.backward(loss);
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }
}
