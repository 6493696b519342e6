//! A small tape-based reverse-mode autodiff over dense `f64` matrices.
//!
//! Every node holds a 2-D value; scalars are `1x1`. Nodes are appended in
//! topological order, so the backward pass is a single reverse sweep.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const BCE_EPS: f64 = 1e-12;
pub(crate) const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (n x c) + b (1 x c)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    L2NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    /// `out[r] = weight[r] * sum of part rows mapped to r`.
    MergeRows {
        parts: Vec<(Var, Vec<usize>)>,
        weights: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    MeanRows(Var),
    /// `a / s` with `s` a `1x1` node.
    DivScalar(Var, Var),
    /// Mean of the selected rows in each column; `sel[j]` lists the rows.
    TopKMeanCols(Var, Vec<Vec<usize>>),
    Bce(Var, f64),
    SoftmaxXent(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
}

fn row_norms(x: &Array2<f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Row-wise L2 normalisation; rows with norm below `NORM_EPS` map to zero.
pub(crate) fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for (mut row, norm) in y.rows_mut().into_iter().zip(row_norms(x)) {
        if norm < NORM_EPS {
            row.fill(0.0);
        } else {
            row /= norm;
        }
    }
    y
}

fn layer_norm_stats(x: &Array2<f64>) -> Vec<(f64, f64)> {
    let c = x.ncols() as f64;
    x.rows()
        .into_iter()
        .map(|r| {
            let mean = r.sum() / c;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
        })
        .collect()
}

/// Indices of the `k` largest entries, ties resolved towards lower index.
pub(crate) fn top_k_indices(values: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = values.enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.into_iter().take(k).map(|(i, _)| i).collect()
}

fn bce_value(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
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

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1 x c row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Row softmax; `-inf` entries receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Row layer normalisation without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let stats = layer_norm_stats(x);
        let mut v = x.clone();
        for (mut row, (mean, inv)) in v.rows_mut().into_iter().zip(stats) {
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::LayerNormRows(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = l2_normalize_rows(self.value(a));
        self.push(v, Op::L2NormalizeRows(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::GatherRows(a, rows), &[a])
    }

    /// Scatters the rows of each part to `rows`, sums, and scales output row
    /// `r` by `weights[r]`.
    pub fn merge_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, weights: Vec<f64>) -> Var {
        let n = weights.len();
        let c = self.shape(parts[0].0).1;
        let mut out = Array2::zeros((n, c));
        for (p, rows) in &parts {
            let pv = self.value(*p);
            for (k, &r) in rows.iter().enumerate() {
                let mut dst = out.row_mut(r);
                dst += &pv.row(k);
            }
        }
        for (mut row, w) in out.rows_mut().into_iter().zip(&weights) {
            row *= *w;
        }
        let parents: Vec<Var> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::MergeRows { parts, weights }, &parents)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column count mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row count mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a), &[a])
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) / self.item(s);
        self.push(v, Op::DivScalar(a, s), &[a, s])
    }

    /// For every column, the mean of its `k` largest entries (`1 x c`).
    pub fn top_k_mean_cols(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let k = k.clamp(1, x.nrows());
        let sel: Vec<Vec<usize>> = x
            .columns()
            .into_iter()
            .map(|col| top_k_indices(col.iter().cloned(), k))
            .collect();
        let v = Array2::from_shape_fn((1, x.ncols()), |(_, j)| {
            sel[j].iter().map(|&i| x[[i, j]]).sum::<f64>() / k as f64
        });
        self.push(v, Op::TopKMeanCols(a, sel), &[a])
    }

    /// Binary cross-entropy of a `1x1` probability against `target`.
    pub fn bce(&mut self, p: Var, target: f64) -> Var {
        let v = Array2::from_elem((1, 1), bce_value(self.item(p), target));
        self.push(v, Op::Bce(p, target), &[p])
    }

    /// `-log softmax(logits)[target]` for a `1 x m` row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let v = Array2::from_elem((1, 1), lse - z[[0, target]]);
        self.push(v, Op::SoftmaxXent(logits, target), &[logits])
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.dot(val(*b)));
                acc(*b, g.t().dot(val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Gelu(a) => {
                let x = val(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |d, &x| *d *= gelu_grad(x));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    drow.scaled_add(-s, &yrow);
                }
                acc(*a, d);
            }
            Op::LayerNormRows(a) => {
                let stats = layer_norm_stats(val(*a));
                let c = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), (_, inv)) in
                    d.rows_mut().into_iter().zip(y.rows()).zip(stats)
                {
                    let mean_g = drow.sum() / c;
                    let mean_gy = drow.dot(&yrow) / c;
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = inv * (*dv - mean_g - yv * mean_gy));
                }
                acc(*a, d);
            }
            Op::L2NormalizeRows(a) => {
                let norms = row_norms(val(*a));
                let mut d = g.clone();
                for ((mut drow, yrow), norm) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    if norm < NORM_EPS {
                        drow.fill(0.0);
                        continue;
                    }
                    let proj = drow.dot(&yrow);
                    drow.scaled_add(-proj, &yrow);
                    drow /= norm;
                }
                acc(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                acc(*a, d);
            }
            Op::MergeRows { parts, weights } => {
                for (p, rows) in parts {
                    let mut d = Array2::zeros(val(*p).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        d.row_mut(k).scaled_add(weights[r], &g.row(r));
                    }
                    acc(*p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    acc(*p, g.slice(s![at..at + n, ..]).to_owned());
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let c = val(*p).ncols();
                    acc(*p, g.slice(s![.., at..at + c]).to_owned());
                    at += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::SumAll(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = x.nrows() as f64;
                let d = Array2::from_shape_fn(x.dim(), |(_, j)| g[[0, j]] / n);
                acc(*a, d);
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s)[[0, 0]];
                acc(*a, g / sv);
                let num = (g * val(*a)).sum();
                acc(*s, Array2::from_elem((1, 1), -num / (sv * sv)));
            }
            Op::TopKMeanCols(a, sel) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (j, rows) in sel.iter().enumerate() {
                    let k = rows.len() as f64;
                    for &i in rows {
                        d[[i, j]] += g[[0, j]] / k;
                    }
                }
                acc(*a, d);
            }
            Op::Bce(p, target) => {
                let pv = val(*p)[[0, 0]];
                let dp = if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                    0.0
                } else {
                    -target / pv + (1.0 - target) / (1.0 - pv)
                };
                acc(*p, Array2::from_elem((1, 1), g[[0, 0]] * dp));
            }
            Op::SoftmaxXent(logits, target) => {
                let mut d = softmax_rows(val(*logits));
                d[[0, *target]] -= 1.0;
                acc(*logits, d * g[[0, 0]]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares the analytic gradient of `f` with central differences for
    /// every input entry.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |xs: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = f(&mut g, &vars);
            g.item(out)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / scale < 1e-5,
                    "input {k} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, w) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 5, 4));
        check(vec![a.clone(), b], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.gelu(y);
            g.sum_all(y)
        });
        check(vec![a, w], |g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            let t = g.transpose(y);
            let s = g.sigmoid(t);
            g.sum_all(s)
        });
    }

    #[test]
    fn normalisations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, w) = (random(&mut rng, 3, 5), random(&mut rng, 3, 5));
        check(vec![x.clone(), w.clone()], |g, v| {
            let y = g.softmax_rows(v[0]);
            let m = g.mul(y, v[1]);
            g.sum_all(m)
        });
        check(vec![x.clone(), w.clone()], |g, v| {
            let y = g.layer_norm_rows(v[0]);
            let m = g.mul(y, v[1]);
            g.sum_all(m)
        });
        check(vec![x, w], |g, v| {
            let y = g.l2_normalize_rows(v[0]);
            let m = g.mul(y, v[1]);
            g.sum_all(m)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, r, w) = (random(&mut rng, 4, 3), random(&mut rng, 1, 3), random(&mut rng, 6, 3));
        check(vec![x.clone(), r.clone(), w.clone()], |g, v| {
            let a = g.add_row(v[0], v[1]);
            let first = g.gather_rows(a, vec![0, 1, 2]);
            let second = g.gather_rows(a, vec![2, 3]);
            let m = g.merge_rows(vec![(first, vec![0, 1, 2]), (second, vec![2, 3])], vec![1.0, 1.0, 0.5, 1.0]);
            let c = g.concat_rows(&[m, v[1], v[1]]);
            let p = g.mul(c, v[2]);
            let wide = g.concat_cols(&[p, p]);
            let sl = g.slice_cols(wide, 2, 5);
            let sq = g.mul(sl, sl);
            g.sum_all(sq)
        });
        check(vec![x.clone(), r], |g, v| {
            let mean = g.mean_rows(v[0]);
            let d = g.sub(mean, v[1]);
            let s = g.scale(d, 3.0);
            let rl = g.relu(s);
            let sum = g.sum_all(v[1]);
            let q = g.div_scalar(rl, sum);
            let sq = g.mul(q, q);
            g.sum_all(sq)
        });
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 3);
        check(vec![x.clone()], |g, v| {
            let p = g.sigmoid(v[0]);
            let t = g.top_k_mean_cols(p, 2);
            let s = g.slice_cols(t, 1, 2);
            g.bce(s, 1.0)
        });
        check(vec![x], |g, v| {
            let t = g.top_k_mean_cols(v[0], 2);
            let z = g.scale(t, 1.0 / 0.07);
            g.softmax_cross_entropy(z, 2)
        });
    }

    #[test]
    fn masked_softmax_assigns_zero_weight() {
        let mut g = Graph::new();
        let x = g.param(ndarray::array![[1.0, 2.0, 0.5]]);
        let mask = g.constant(ndarray::array![[0.0, f64::NEG_INFINITY, 0.0]]);
        let m = g.add(x, mask);
        let y = g.softmax_rows(m);
        assert_eq!(g.value(y)[[0, 1]], 0.0);
        let s = g.slice_cols(y, 0, 1);
        let grads = g.backward(s);
        let dx = grads.get(x).unwrap();
        assert_eq!(dx[[0, 1]], 0.0);
        assert!(dx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Array2::ones((2, 2)));
        let p = g.param(Array2::ones((2, 2)));
        let m = g.mul(c, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices([0.5, 0.9, 0.5, 0.9].into_iter(), 3), vec![1, 3, 0]);
    }
}
