//! Minimal reverse-mode autodiff over dense f64 matrices.
//!
//! The model's forward pass is a straight-line program over a small set of
//! matrix operations, so a tape of immutable nodes is enough: ops append
//! nodes, `backward` walks the tape once in reverse. Sparse propagation
//! operators are frozen constants and enter only through `spmm`.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::graphs::SparseGraph;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// a . b^T
    MatMulNT(Var, Var),
    SpMM(Arc<SparseGraph>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (n x d) + (1 x d), broadcast over rows
    AddRowBroadcast(Var, Var),
    /// (n x d) ⊙ (n x 1), broadcast over columns
    MulColBroadcast(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sqrt(Var),
    Softplus(Var),
    Scale(Var, f64),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCol(Var, usize),
    SoftmaxRows(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ColMean(Var),
    MeanAll(Var),
    SumAll(Var),
    L2NormalizeRows(Var),
    RowDot(Var, Var),
    LogSumExpRows(Var),
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Shared handle to a node's value (cheap to clone).
    pub fn value_arc(&self, v: Var) -> Arc<Array2<f64>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-1x1 node");
        m[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Array2<f64>>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::MulColBroadcast(a, b)
            | Op::ConcatRows(a, b)
            | Op::RowDot(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::ConcatCols(vars) => vars.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::SpMM(_, a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::Scale(a, _)
            | Op::SliceCol(a, _)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::ColMean(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::L2NormalizeRows(a)
            | Op::LogSumExpRows(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input backed by shared storage; the tape does not copy
    /// the matrix.
    pub fn constant_arc(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.push_arc(value, Op::Constant)
    }

    /// Trainable parameter node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-trainable input node.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a . b^T`; used for anchor-candidate similarity matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn spmm(&mut self, graph: &Arc<SparseGraph>, x: Var) -> Var {
        let v = graph.matmul(self.value(x));
        self.push(v, Op::SpMM(Arc::clone(graph), x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRowBroadcast(a, row))
    }

    pub fn mul_col_broadcast(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulColBroadcast(a, col))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ncols(), vb.ncols());
        let v = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).expect("concat rows");
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let views: Vec<_> = vars.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat cols");
        self.push(v, Op::ConcatCols(vars.to_vec()))
    }

    pub fn slice_col(&mut self, a: Var, col: usize) -> Var {
        let v = self
            .value(a)
            .column(col)
            .to_owned()
            .insert_axis(Axis(1));
        self.push(v, Op::SliceCol(a, col))
    }

    /// Row-wise softmax, max-stabilized.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((rows.len(), x.ncols()));
        for (dst, &src) in rows.iter().enumerate() {
            v.row_mut(dst).assign(&x.row(src));
        }
        self.push(v, Op::GatherRows(a, rows))
    }

    /// Column means: (n x d) -> (1 x d).
    pub fn col_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows() as f64;
        let v = (x.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.push(v, Op::ColMean(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Row-wise L2 normalization; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|x| x / norm);
            }
        }
        self.push(v, Op::L2NormalizeRows(a))
    }

    /// Per-row dot product: two (n x d) inputs -> (n x 1).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        assert_eq!(xa.dim(), xb.dim());
        let mut v = Array2::zeros((xa.nrows(), 1));
        for r in 0..xa.nrows() {
            v[[r, 0]] = xa.row(r).dot(&xb.row(r));
        }
        self.push(v, Op::RowDot(a, b))
    }

    /// Row-wise log(sum(exp(x))), max-stabilized: (n x k) -> (n x 1).
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((x.nrows(), 1));
        for (r, row) in x.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            v[[r, 0]] = m + s.ln();
        }
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Gradients of `root` (a 1x1 node) with respect to every node that
    /// requires one. Returns a per-node vector; non-participating nodes are
    /// `None`.
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    self.accum(&mut grads, *a, g.dot(&self.value(*b).t()));
                    self.accum(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    self.accum(&mut grads, *a, g.dot(self.value(*b)));
                    self.accum(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::SpMM(graph, a) => {
                    self.accum(&mut grads, *a, graph.matmul_transpose(&g));
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    self.accum(&mut grads, *a, &g * self.value(*b));
                    self.accum(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRowBroadcast(a, row) => {
                    self.accum(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    self.accum(&mut grads, *a, g);
                }
                Op::MulColBroadcast(a, col) => {
                    let ga = &g * self.value(*col);
                    let gcol = (&g * self.value(*a))
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *col, gcol);
                }
                Op::Sigmoid(a) => {
                    let v: &Array2<f64> = &self.nodes[idx].value;
                    self.accum(&mut grads, *a, &g * &(v * &(1.0 - v)));
                }
                Op::Tanh(a) => {
                    let v: &Array2<f64> = &self.nodes[idx].value;
                    self.accum(&mut grads, *a, &g * &(1.0 - v * v));
                }
                Op::Abs(a) => {
                    let sign = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    self.accum(&mut grads, *a, &g * &sign);
                }
                Op::Sqrt(a) => {
                    let v: &Array2<f64> = &self.nodes[idx].value;
                    let ga = ndarray::Zip::from(&g).and(v).map_collect(|&g, &v| {
                        if v > 0.0 {
                            g / (2.0 * v)
                        } else {
                            0.0
                        }
                    });
                    self.accum(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let s = self.value(*a).mapv(stable_sigmoid);
                    self.accum(&mut grads, *a, &g * &s);
                }
                Op::Scale(a, c) => {
                    self.accum(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    let ga = g.slice(ndarray::s![..na, ..]).to_owned();
                    let gb = g.slice(ndarray::s![na.., ..]).to_owned();
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::ConcatCols(vars) => {
                    let mut off = 0;
                    for v in vars {
                        let w = self.value(*v).ncols();
                        let gv = g.slice(ndarray::s![.., off..off + w]).to_owned();
                        self.accum(&mut grads, *v, gv);
                        off += w;
                    }
                }
                Op::SliceCol(a, col) => {
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        ga[[r, *col]] = g[[r, 0]];
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let w: &Array2<f64> = &self.nodes[idx].value;
                    let mut ga = Array2::zeros(w.dim());
                    for r in 0..w.nrows() {
                        let dot: f64 = (0..w.ncols()).map(|c| g[[r, c]] * w[[r, c]]).sum();
                        for c in 0..w.ncols() {
                            ga[[r, c]] = w[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (src, &dst) in rows.iter().enumerate() {
                        let mut row = ga.row_mut(dst);
                        row += &g.row(src);
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::ColMean(a) => {
                    let x = self.value(*a);
                    let n = x.nrows() as f64;
                    let mut ga = Array2::zeros(x.dim());
                    for mut row in ga.rows_mut() {
                        row.assign(&(&g.row(0) / n));
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let x = self.value(*a);
                    let c = g[[0, 0]] / x.len() as f64;
                    self.accum(&mut grads, *a, Array2::from_elem(x.dim(), c));
                }
                Op::SumAll(a) => {
                    let x = self.value(*a);
                    self.accum(&mut grads, *a, Array2::from_elem(x.dim(), g[[0, 0]]));
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let v: &Array2<f64> = &self.nodes[idx].value;
                    let mut ga = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let norm = x.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            let gv = g.row(r);
                            let vr = v.row(r);
                            let dot = gv.dot(&vr);
                            for c in 0..x.ncols() {
                                ga[[r, c]] = (gv[c] - dot * vr[c]) / norm;
                            }
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (xa, xb) = (self.value(*a), self.value(*b));
                    let mut ga = Array2::zeros(xa.dim());
                    let mut gb = Array2::zeros(xb.dim());
                    for r in 0..xa.nrows() {
                        let gr = g[[r, 0]];
                        for c in 0..xa.ncols() {
                            ga[[r, c]] = gr * xb[[r, c]];
                            gb[[r, c]] = gr * xa[[r, c]];
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let lse: &Array2<f64> = &self.nodes[idx].value;
                    let mut ga = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let gr = g[[r, 0]];
                        for c in 0..x.ncols() {
                            ga[[r, c]] = gr * (x[[r, c]] - lse[[r, 0]]).exp();
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
            }
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of a scalar-valued tape program against its
    /// own backward pass, over every entry of every leaf.
    fn gradcheck(build: impl Fn(&mut Tape, &[Var]) -> Var, leaves: &[Array2<f64>], tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[vars[li].0].as_ref().expect("leaf grad");
            for idx in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Array2<f64>> = leaves.to_vec();
                    perturbed[li].as_slice_mut().unwrap()[idx] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().map(|m| t.leaf(m.clone())).collect();
                    let r = build(&mut t, &vs);
                    t.scalar(r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "leaf {li} entry {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        gradcheck(
            |t, vs| {
                let m = t.matmul(vs[0], vs[1]);
                let s = t.sigmoid(m);
                t.mean_all(s)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_row_dot_lse_gradients() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 5, 3);
        gradcheck(
            |t, vs| {
                let an = t.l2_normalize_rows(vs[0]);
                let bn = t.l2_normalize_rows(vs[1]);
                let sims = t.matmul_nt(an, bn);
                let lse = t.log_sum_exp_rows(sims);
                t.mean_all(lse)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn broadcast_softmax_gather_gradients() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 5, 3);
        let bias = rand_mat(&mut rng, 1, 3);
        let col = rand_mat(&mut rng, 5, 1);
        gradcheck(
            |t, vs| {
                let h = t.add_row_broadcast(vs[0], vs[1]);
                let h = t.tanh(h);
                let h = t.mul_col_broadcast(h, vs[2]);
                let idx = Arc::new(vec![0usize, 2, 2, 4]);
                let g = t.gather_rows(h, idx);
                let sm = t.softmax_rows(g);
                let picked = t.slice_col(sm, 1);
                t.sum_all(picked)
            },
            &[x, bias, col],
            1e-6,
        );
    }

    #[test]
    fn stats_pipeline_gradients() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 6, 4);
        let y = rand_mat(&mut rng, 6, 4);
        gradcheck(
            |t, vs| {
                // mean(|mu_x - mu_y|) + mean(|sigma_x - sigma_y|)
                let terms: Vec<Var> = [vs[0], vs[1]]
                    .iter()
                    .map(|&v| {
                        let mu = t.col_mean(v);
                        let neg = t.scale(mu, -1.0);
                        let centered = t.add_row_broadcast(v, neg);
                        let sq = t.mul(centered, centered);
                        let var = t.col_mean(sq);
                        let sd = t.sqrt(var);
                        t.concat_cols(&[mu, sd])
                    })
                    .collect();
                let diff = t.sub(terms[0], terms[1]);
                let a = t.abs(diff);
                t.mean_all(a)
            },
            &[x, y],
            1e-5,
        );
    }

    #[test]
    fn spmm_softplus_gradients() {
        let graph = Arc::new(
            SparseGraph::from_entries(
                4,
                4,
                vec![(0, 1, 0.5), (1, 0, 0.5), (2, 3, 0.7), (3, 2, 0.7), (1, 2, -0.3)],
            )
            .unwrap(),
        );
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 4, 3);
        gradcheck(
            |t, vs| {
                let p = t.spmm(&graph, vs[0]);
                let p2 = t.spmm(&graph, p);
                let cat = t.concat_rows(p, p2);
                let sp = t.softplus(cat);
                t.mean_all(sp)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn values_are_forward_exact() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.constant(array![[0.5, 0.5], [1.0, 0.0]]);
        let prod = t.mul(a, b);
        assert_eq!(t.value(prod), &array![[0.5, 1.0], [3.0, 0.0]]);
        let s = t.sum_all(prod);
        assert_eq!(t.scalar(s), 4.5);
    }

    #[test]
    fn duplicate_gather_rows_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0], [2.0]]);
        let g = t.gather_rows(x, Arc::new(vec![0, 0, 1]));
        let s = t.sum_all(g);
        let grads = t.backward(s);
        assert_eq!(grads[x.0].as_ref().unwrap(), &array![[2.0], [1.0]]);
    }

    #[test]
    fn zero_row_l2_normalize_is_safe() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0, 0.0], [3.0, 4.0]]);
        let n = t.l2_normalize_rows(x);
        assert_eq!(t.value(n).row(0).to_vec(), vec![0.0, 0.0]);
        let s = t.sum_all(n);
        let grads = t.backward(s);
        assert!(grads[x.0].as_ref().unwrap().iter().all(|v| v.is_finite()));
    }
}
