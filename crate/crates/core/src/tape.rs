//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates
//! gradients for every parameter leaf into a [`Gradients`] buffer laid out
//! like the model's parameter list.

use crate::objective::{pair_loss, pair_loss_grad, Aggregation, TargetVector};
use crate::scoring::ScoringKind;
use crate::tensor::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    UnfoldRows(Var, usize),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    MaskedSoftmaxRows(Var, usize),
    LayerNormRows(Var, Vec<f64>),
    Reshape(Var),
    TripleScores {
        kind: ScoringKind,
        head: Var,
        cre: Var,
        tail: Var,
    },
    Aggregate(Vec<Var>, Aggregation, Vec<usize>),
    PairLoss(Var, TargetVector),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradient buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn zeros_like(params: &[Matrix]) -> Self {
        Gradients(params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for parameter `id`; recorded once per tape.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        if id >= self.param_vars.len() {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.value(a).cols()), "add_row shape mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).shape(), (1, self.value(a).cols()), "mul_row shape mismatch");
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(c);
        self.push(value, Op::Scale(a, c))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let v = self.value(a);
        Matrix::from_vec(v.rows(), v.cols(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                value.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
                offset += v.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        let mut value = Matrix::zeros(v.rows(), end - start);
        for i in 0..v.rows() {
            value.row_mut(i).copy_from_slice(&v.row(i)[start..end]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        let data = v.data()[start * v.cols()..end * v.cols()].to_vec();
        let value = Matrix::from_vec(end - start, v.cols(), data);
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(indices.len(), t.cols());
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(idx));
        }
        self.push(value, Op::GatherRows(table, indices.to_vec()))
    }

    /// Row `t` of the output is rows `t - w/2 ..= t + w/2` of `a` laid side by
    /// side, with zeros for rows outside `a`.
    pub fn unfold_rows(&mut self, a: Var, window: usize) -> Var {
        let v = self.value(a);
        let (n, c) = v.shape();
        let half = window / 2;
        let mut value = Matrix::zeros(n, window * c);
        for t in 0..n {
            for j in 0..window {
                let src = t + j;
                if src < half || src - half >= n {
                    continue;
                }
                value.row_mut(t)[j * c..(j + 1) * c].copy_from_slice(v.row(src - half));
            }
        }
        self.push(value, Op::UnfoldRows(a, window))
    }

    /// Columnwise maximum over rows, giving a `1 x cols` row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut arg = vec![0usize; v.cols()];
        let mut best = v.row(0).to_vec();
        for i in 1..v.rows() {
            for (c, &x) in v.row(i).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    arg[c] = i;
                }
            }
        }
        self.push(Matrix::row_vector(best), Op::MaxRows(a, arg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.rows() as f64;
        let mut out = vec![0.0; v.cols()];
        for i in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Matrix::row_vector(out), Op::MeanRows(a))
    }

    /// Row-wise softmax over the first `valid` columns; remaining columns are
    /// exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Var, valid: usize) -> Var {
        let value = masked_softmax(self.value(a), valid);
        self.push(value, Op::MaskedSoftmaxRows(a, valid))
    }

    /// Per-row standardization to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, c) = v.shape();
        let mut value = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, x) in value.row_mut(i).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(value, Op::LayerNormRows(a, inv_std))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = Matrix::from_vec(rows, cols, self.value(a).data().to_vec());
        self.push(value, Op::Reshape(a))
    }

    /// Scores every row of `cre` against `head`/`tail` (both `1 x K`),
    /// producing a `1 x R` row.
    pub fn triple_scores(&mut self, kind: ScoringKind, head: Var, cre: Var, tail: Var) -> Var {
        let (h, c, t) = (self.value(head), self.value(cre), self.value(tail));
        let scores = (0..c.rows())
            .map(|r| kind.score_unchecked(h.data(), c.row(r), t.data()))
            .collect();
        self.push(
            Matrix::row_vector(scores),
            Op::TripleScores {
                kind,
                head,
                cre,
                tail,
            },
        )
    }

    pub fn aggregate(&mut self, parts: &[Var], mode: Aggregation) -> Var {
        let rows: Vec<&[f64]> = parts.iter().map(|&p| self.value(p).data()).collect();
        let width = rows[0].len();
        let mut winners = vec![0usize; width];
        let mut out = rows[0].to_vec();
        for (j, row) in rows.iter().enumerate().skip(1) {
            for r in 0..width {
                match mode {
                    Aggregation::Sum | Aggregation::Mean => out[r] += row[r],
                    Aggregation::Max => {
                        if row[r] > out[r] {
                            out[r] = row[r];
                            winners[r] = j;
                        }
                    }
                    Aggregation::Min => {
                        if row[r] < out[r] {
                            out[r] = row[r];
                            winners[r] = j;
                        }
                    }
                }
            }
        }
        if mode == Aggregation::Mean {
            let n = parts.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        self.push(
            Matrix::row_vector(out),
            Op::Aggregate(parts.to_vec(), mode, winners),
        )
    }

    /// Normalizes a `1 x R` score row and applies the pair loss, giving `1 x 1`.
    pub fn pair_loss(&mut self, scores: Var, target: TargetVector) -> Var {
        let s = self.value(scores).data();
        let total: f64 = s.iter().sum();
        let ns: Vec<f64> = s.iter().map(|x| x / total).collect();
        let loss = pair_loss(&ns, &target, target.gold_size());
        self.push(Matrix::row_vector(vec![loss]), Op::PairLoss(scores, target))
    }

    /// Accumulates `d(output)/d(param)` into `grads`. `output` must be `1 x 1`.
    pub fn backward(&self, output: Var, grads: &mut Gradients) {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.0[*id].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose());
                    let gb = self.value(*a).transpose().matmul(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (o, x) in gr.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *row, Matrix::row_vector(gr));
                    accumulate(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let vr = self.value(*row).data();
                    let mut ga = g.clone();
                    let mut gr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for c in 0..g.cols() {
                            gr[c] += g.get(i, c) * va.get(i, c);
                            ga.set(i, c, g.get(i, c) * vr[c]);
                        }
                    }
                    accumulate(&mut adj, *row, Matrix::row_vector(gr));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Mul(a, b) => {
                    let ga = zip_with(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_with(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    ga.scale_assign(*c);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_with(&g, &node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_with(&g, &node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_with(&g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut adj, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (n, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(n, c);
                    for i in 0..n {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (n, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(n, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut adj, *a, ga);
                }
                Op::GatherRows(table, indices) => {
                    let (n, c) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(n, c);
                    for (i, &idx) in indices.iter().enumerate() {
                        for (o, x) in gt.row_mut(idx).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut adj, *table, gt);
                }
                Op::UnfoldRows(a, window) => {
                    let (n, c) = self.value(*a).shape();
                    let half = window / 2;
                    let mut ga = Matrix::zeros(n, c);
                    for t in 0..n {
                        for j in 0..*window {
                            let src = t + j;
                            if src < half || src - half >= n {
                                continue;
                            }
                            let gsrc = &g.row(t)[j * c..(j + 1) * c];
                            for (o, x) in ga.row_mut(src - half).iter_mut().zip(gsrc) {
                                *o += x;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let (n, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(n, c);
                    for (col, &row) in arg.iter().enumerate() {
                        ga.set(row, col, g.get(0, col));
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (n, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(n, c);
                    for i in 0..n {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = x / n as f64;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::MaskedSoftmaxRows(a, valid) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = (0..*valid).map(|j| y.get(i, j) * g.get(i, j)).sum();
                        for j in 0..*valid {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::LayerNormRows(a, inv_std) => {
                    let y = &node.value;
                    let (n, c) = y.shape();
                    let mut ga = Matrix::zeros(n, c);
                    for i in 0..n {
                        let gy = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gy.iter().sum::<f64>() / c as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (k, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (gy[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Reshape(a) => {
                    let (n, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Matrix::from_vec(n, c, g.into_vec()));
                }
                Op::TripleScores {
                    kind,
                    head,
                    cre,
                    tail,
                } => {
                    let (h, c, t) = (self.value(*head), self.value(*cre), self.value(*tail));
                    let k = h.cols();
                    let mut gh = vec![0.0; k];
                    let mut gt = vec![0.0; k];
                    let mut gc = Matrix::zeros(c.rows(), k);
                    for r in 0..c.rows() {
                        kind.accumulate_grad(
                            h.data(),
                            c.row(r),
                            t.data(),
                            g.get(0, r),
                            &mut gh,
                            gc.row_mut(r),
                            &mut gt,
                        );
                    }
                    accumulate(&mut adj, *head, Matrix::row_vector(gh));
                    accumulate(&mut adj, *cre, gc);
                    accumulate(&mut adj, *tail, Matrix::row_vector(gt));
                }
                Op::Aggregate(parts, mode, winners) => match mode {
                    Aggregation::Sum => {
                        for &p in parts {
                            accumulate(&mut adj, p, g.clone());
                        }
                    }
                    Aggregation::Mean => {
                        let mut gp = g;
                        gp.scale_assign(1.0 / parts.len() as f64);
                        for &p in parts {
                            accumulate(&mut adj, p, gp.clone());
                        }
                    }
                    Aggregation::Max | Aggregation::Min => {
                        let width = g.cols();
                        for (j, &p) in parts.iter().enumerate() {
                            let data = (0..width)
                                .map(|r| if winners[r] == j { g.get(0, r) } else { 0.0 })
                                .collect();
                            accumulate(&mut adj, p, Matrix::row_vector(data));
                        }
                    }
                },
                Op::PairLoss(scores, target) => {
                    let s = self.value(*scores).data();
                    let total: f64 = s.iter().sum();
                    let ns: Vec<f64> = s.iter().map(|x| x / total).collect();
                    let dns = pair_loss_grad(&ns, target, target.gold_size());
                    let dot: f64 = dns.iter().zip(&ns).map(|(a, b)| a * b).sum();
                    let upstream = g.get(0, 0);
                    let data = dns.iter().map(|d| upstream * (d - dot) / total).collect();
                    accumulate(&mut adj, *scores, Matrix::row_vector(data));
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// Row-wise softmax restricted to the first `valid` columns.
pub fn masked_softmax(x: &Matrix, valid: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = &x.row(i)[..valid];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / z);
        }
    }
    out
}
