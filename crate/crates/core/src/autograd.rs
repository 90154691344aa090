//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; node indices are a
//! topological order, so [`Tape::backward`] walks the tape in reverse.
//! Persistent gradients live only on nodes created with
//! `requires_grad = true` and accumulate across `backward` calls until
//! [`Tape::zero_grad`].

use crate::tensor::{gemm, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    /// Stores the local derivative computed in the forward pass.
    Gelu(Var, Vec<f64>),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    VarianceRows(Var),
    GatherRows { src: Var, index: Vec<usize> },
    ScatterRows { src: Var, index: Vec<usize> },
    GatherElems { src: Var, index: Vec<(usize, usize)> },
    ScaleRows { src: Var, weights: Var },
    ColumnMean(Var),
    DotConst { src: Var, weights: Vec<f64> },
    NormalizeSegments { src: Var, segments: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
    /// Some `requires_grad` leaf is reachable from this node.
    tracked: bool,
}

/// A recording of tensor operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU value and derivative at `x`.
fn gelu(x: f64) -> (f64, f64) {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Population variance of a slice (divides by its length).
pub fn population_variance(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Sum of each entry's segment, broadcast back to the entry.
fn segment_sums(x: &[f64], segments: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut start = 0;
    while start < x.len() {
        let mut end = start;
        while end < x.len() && segments[end] == segments[start] {
            end += 1;
        }
        let s: f64 = x[start..end].iter().sum();
        out[start..end].iter_mut().for_each(|o| *o = s);
        start = end;
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        match self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => [Some(*a), Some(*b)],
            Op::ScaleRows { src, weights } => [Some(*src), Some(*weights)],
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Gelu(a, _)
            | Op::SoftmaxRows(a)
            | Op::VarianceRows(a)
            | Op::ColumnMean(a)
            | Op::CrossEntropy { logits: a, .. }
            | Op::GatherRows { src: a, .. }
            | Op::ScatterRows { src: a, .. }
            | Op::GatherElems { src: a, .. }
            | Op::DotConst { src: a, .. }
            | Op::NormalizeSegments { src: a, .. } => [Some(*a), None],
        }
    }
}

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().flatten().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            grad: None,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are kept only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: grad.is_some(),
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            row.iter_mut().zip(tb.data()).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * x).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (data, deriv) = ta.data().iter().map(|&x| gelu(x)).unzip();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a, deriv))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let k = ta.cols().max(1);
        let mut data = vec![0.0; ta.len()];
        for (row, out) in ta.data().chunks(k).zip(data.chunks_mut(k)) {
            softmax_row(row, out);
        }
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let (m, c) = (t.rows(), t.cols());
        if t.shape().len() != 2 || labels.len() != m {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                extent: c,
            });
        }
        let mut total = 0.0;
        for (row, &label) in t.iter_rows().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = if m == 0 { 0.0 } else { total / m as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Population variance of every row of an `m×K` matrix.
    pub fn variance_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = ta.iter_rows().map(population_variance).collect();
        let value = Tensor::vector(data);
        self.push(value, Op::VarianceRows(a))
    }

    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(src);
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![index.len(), n], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
        ))
    }

    /// Sums row `r` of `src` into row `index[r]` of a zero `rows×n` output.
    pub fn scatter_rows(
        &mut self,
        src: Var,
        index: &[usize],
        rows: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(src);
        if t.rows() != index.len() || t.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "scatter_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let n = t.cols();
        let mut data = vec![0.0; rows * n];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "scatter_rows",
                    index: i,
                    extent: rows,
                });
            }
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(t.row(r))
                .for_each(|(d, s)| *d += s);
        }
        let value = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                src,
                index: index.to_vec(),
            },
        ))
    }

    /// Picks `src[i, j]` for each `(i, j)` into a vector.
    pub fn gather_elems(&mut self, src: Var, index: &[(usize, usize)]) -> Result<Var, TensorError> {
        let t = self.value(src);
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len());
        for &(i, j) in index {
            if i >= m || j >= n {
                return Err(TensorError::Index {
                    op: "gather_elems",
                    index: i.max(j),
                    extent: if i >= m { m } else { n },
                });
            }
            data.push(t.get(i, j));
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::GatherElems {
                src,
                index: index.to_vec(),
            },
        ))
    }

    /// Multiplies row `r` of an `m×n` matrix by `weights[r]`.
    pub fn scale_rows(&mut self, src: Var, weights: Var) -> Result<Var, TensorError> {
        let (t, w) = (self.value(src), self.value(weights));
        if t.shape().len() != 2 || w.len() != t.rows() {
            return Err(shape_err("scale_rows", t, w));
        }
        let n = t.cols().max(1);
        let mut data = t.data().to_vec();
        for (row, &s) in data.chunks_mut(n).zip(w.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleRows { src, weights }))
    }

    /// Mean over rows, giving one entry per column.
    pub fn column_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; n];
        for row in t.iter_rows() {
            data.iter_mut().zip(row).for_each(|(d, x)| *d += x);
        }
        if m > 0 {
            data.iter_mut().for_each(|d| *d /= m as f64);
        }
        self.push(Tensor::vector(data), Op::ColumnMean(a))
    }

    /// `Σ weights[i] · src[i]` with constant weights.
    pub fn dot_const(&mut self, src: Var, weights: &[f64]) -> Result<Var, TensorError> {
        let t = self.value(src);
        if t.len() != weights.len() {
            return Err(TensorError::Shape {
                op: "dot_const",
                lhs: t.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = t.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConst {
                src,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Divides each entry of a vector by the sum of the entries sharing its
    /// segment id. Segment ids must be nondecreasing.
    pub fn normalize_segments(&mut self, src: Var, segments: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(src);
        if t.len() != segments.len() {
            return Err(TensorError::Shape {
                op: "normalize_segments",
                lhs: t.shape().to_vec(),
                rhs: vec![segments.len()],
            });
        }
        let sums = segment_sums(t.data(), segments);
        let data = t.data().iter().zip(&sums).map(|(x, s)| x / s).collect();
        Ok(self.push(
            Tensor::vector(data),
            Op::NormalizeSegments {
                src,
                segments: segments.to_vec(),
            },
        ))
    }

    /// Propagates `d loss / d node` to every `requires_grad` leaf, adding to
    /// whatever those leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let tracked = |v: &Var| self.nodes[v.0].tracked;
            match &node.op {
                Op::Leaf => {
                    if let Some(acc) = self.nodes[idx].grad.as_mut() {
                        acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if tracked(a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, tb.data(), true, &mut ga, 0.0);
                        add_into(&mut adj[a.0], ga);
                    }
                    if tracked(b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, &g, false, &mut gb, 0.0);
                        add_into(&mut adj[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    match (tracked(a), tracked(b)) {
                        (true, true) => {
                            add_into(&mut adj[a.0], g.clone());
                            add_into(&mut adj[b.0], g);
                        }
                        (true, false) => add_into(&mut adj[a.0], g),
                        (false, true) => add_into(&mut adj[b.0], g),
                        (false, false) => {}
                    }
                }
                Op::AddRow(a, bias) => {
                    if tracked(bias) {
                        let n = self.nodes[bias.0].value.len();
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                        add_into(&mut adj[bias.0], gb);
                    }
                    if tracked(a) {
                        add_into(&mut adj[a.0], g);
                    }
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                    add_into(&mut adj[a.0], ga);
                }
                Op::Square(a) => {
                    let x = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect();
                    add_into(&mut adj[a.0], ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.nodes[a.0].value.len()];
                    add_into(&mut adj[a.0], ga);
                }
                Op::Gelu(a, deriv) => {
                    let ga: Vec<f64> = g.iter().zip(deriv).map(|(g, d)| g * d).collect();
                    add_into(&mut adj[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let k = p.cols().max(1);
                    let mut ga = vec![0.0; p.len()];
                    for ((pr, gr), out) in p.data().chunks(k).zip(g.chunks(k)).zip(ga.chunks_mut(k)) {
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for ((o, p), g) in out.iter_mut().zip(pr).zip(gr) {
                            *o = p * (g - dot);
                        }
                    }
                    add_into(&mut adj[a.0], ga);
                }
                Op::CrossEntropy { logits, labels } => {
                    let t = &self.nodes[logits.0].value;
                    let (m, c) = (t.rows(), t.cols());
                    let mut ga = vec![0.0; m * c];
                    let scale = g[0] / m.max(1) as f64;
                    for ((row, out), &label) in t.iter_rows().zip(ga.chunks_mut(c)).zip(labels) {
                        softmax_row(row, out);
                        out[label] -= 1.0;
                        out.iter_mut().for_each(|x| *x *= scale);
                    }
                    add_into(&mut adj[logits.0], ga);
                }
                Op::VarianceRows(a) => {
                    let t = &self.nodes[a.0].value;
                    let k = t.cols().max(1);
                    let kf = k as f64;
                    let mut ga = vec![0.0; t.len()];
                    for ((row, out), &gr) in t.data().chunks(k).zip(ga.chunks_mut(k)).zip(&g) {
                        let mean = row.iter().sum::<f64>() / kf;
                        for (o, p) in out.iter_mut().zip(row) {
                            *o = gr * 2.0 * (p - mean) / kf;
                        }
                    }
                    add_into(&mut adj[a.0], ga);
                }
                Op::GatherRows { src, index } => {
                    let t = &self.nodes[src.0].value;
                    let n = t.cols();
                    let mut gs = vec![0.0; t.len()];
                    for (r, &i) in index.iter().enumerate() {
                        gs[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(d, x)| *d += x);
                    }
                    add_into(&mut adj[src.0], gs);
                }
                Op::ScatterRows { src, index } => {
                    let n = self.nodes[src.0].value.cols();
                    let mut gs = Vec::with_capacity(index.len() * n);
                    for &i in index {
                        gs.extend_from_slice(&g[i * n..(i + 1) * n]);
                    }
                    add_into(&mut adj[src.0], gs);
                }
                Op::GatherElems { src, index } => {
                    let t = &self.nodes[src.0].value;
                    let n = t.cols();
                    let mut gs = vec![0.0; t.len()];
                    for (&(i, j), x) in index.iter().zip(&g) {
                        gs[i * n + j] += x;
                    }
                    add_into(&mut adj[src.0], gs);
                }
                Op::ScaleRows { src, weights } => {
                    let t = &self.nodes[src.0].value;
                    let w = self.nodes[weights.0].value.data();
                    let n = t.cols().max(1);
                    if tracked(weights) {
                        let gw = g
                            .chunks(n)
                            .zip(t.data().chunks(n))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(g, x)| g * x).sum())
                            .collect();
                        add_into(&mut adj[weights.0], gw);
                    }
                    if tracked(src) {
                        let mut gs = g;
                        for (gr, s) in gs.chunks_mut(n).zip(w) {
                            gr.iter_mut().for_each(|x| *x *= s);
                        }
                        add_into(&mut adj[src.0], gs);
                    }
                }
                Op::ColumnMean(a) => {
                    let t = &self.nodes[a.0].value;
                    let m = t.rows();
                    let inv = if m > 0 { 1.0 / m as f64 } else { 0.0 };
                    let row: Vec<f64> = g.iter().map(|x| x * inv).collect();
                    let ga: Vec<f64> = row.iter().copied().cycle().take(t.len()).collect();
                    add_into(&mut adj[a.0], ga);
                }
                Op::DotConst { src, weights } => {
                    let ga: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    add_into(&mut adj[src.0], ga);
                }
                Op::NormalizeSegments { src, segments } => {
                    let x = self.nodes[src.0].value.data();
                    let sums = segment_sums(x, segments);
                    let gx: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * x).collect();
                    let cross = segment_sums(&gx, segments);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&sums)
                        .zip(&cross)
                        .map(|((g, s), c)| g / s - c / (s * s))
                        .collect();
                    add_into(&mut adj[src.0], ga);
                }
            }
        }
        Ok(())
    }
}
