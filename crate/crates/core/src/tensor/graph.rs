use super::Tensor;
use crate::error::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Gelu,
    Exp,
    Ln,
    Abs,
    Square,
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairwiseCost {
    SquaredEuclidean,
    Absolute,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Unary(Var, Unary),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    MeanPoolBlocks(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_block: usize,
        k_block: usize,
        weights: Vec<f64>,
    },
    Pairwise {
        a: Var,
        b: Var,
        block: usize,
        cost: PairwiseCost,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run operation record for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax attention weights, `batches × heads × q_block × k_block` flattened.
///
/// Keys and values are shared across batches when `k.rows() == k_block`.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    q_block: usize,
    k_block: usize,
) -> Result<Vec<f64>, TensorError> {
    let width = q.cols();
    if heads == 0 || !width.is_multiple_of(heads) || k.cols() != width {
        return Err(shape_err("attention", q, k));
    }
    if q_block == 0 || !q.rows().is_multiple_of(q_block) {
        return Err(TensorError::Domain {
            op: "attention",
            detail: format!("query rows {} not divisible by block {q_block}", q.rows()),
        });
    }
    let batches = q.rows() / q_block;
    let shared = k.rows() == k_block;
    if k_block == 0 || !(shared || k.rows() == batches * k_block) {
        return Err(TensorError::Domain {
            op: "attention",
            detail: "no keys available".to_string(),
        });
    }
    let dk = width / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut w = vec![0.0; batches * heads * q_block * k_block];
    for b in 0..batches {
        let k_off = if shared { 0 } else { b * k_block };
        for h in 0..heads {
            let base = (b * heads + h) * q_block * k_block;
            for i in 0..q_block {
                let qi = &q.row(b * q_block + i)[h * dk..(h + 1) * dk];
                let row = &mut w[base + i * k_block..base + (i + 1) * k_block];
                for (j, slot) in row.iter_mut().enumerate() {
                    let kj = &k.row(k_off + j)[h * dk..(h + 1) * dk];
                    *slot = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
            }
        }
    }
    Ok(w)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise division; every denominator must be nonzero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("div", a, b)?;
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "zero denominator".into(),
            });
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// `x (m×n) + r (1×n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var, TensorError> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let c = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(x, r), &[x, r]))
    }

    /// `x (m×n) + c (m×1)` broadcast over columns.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        let (tx, tc) = (self.value(x), self.value(c));
        if tc.cols() != 1 || tc.rows() != tx.rows() {
            return Err(shape_err("add_col", tx, tc));
        }
        let n = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tc.data()[i / n];
        }
        Ok(self.push(out, Op::AddCol(x, c), &[x, c]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// `max(x, lo)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let out = self.value(x).map(|v| v.max(lo));
        self.push(out, Op::ClampMin(x, lo), &[x])
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = self.value(x).map(|v| match kind {
            Unary::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Unary::Tanh => v.tanh(),
            Unary::Gelu => gelu_parts(v).0,
            Unary::Exp => v.exp(),
            Unary::Ln => v.ln(),
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
            Unary::SmoothL1 => {
                if v.abs() < 1.0 {
                    0.5 * v * v
                } else {
                    v.abs() - 0.5
                }
            }
        });
        self.push(out, Op::Unary(x, kind), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Natural log; requires strictly positive input.
    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "ln",
                detail: "non-positive input".into(),
            });
        }
        Ok(self.unary(x, Unary::Ln))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Huber with unit threshold: `0.5 e²` for `|e| < 1`, else `|e| - 0.5`.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Unary::SmoothL1)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(TensorError::Domain {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {}", start + len, t.rows()),
            });
        }
        let out = t.slice_rows(start, len);
        Ok(self.push(out, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(TensorError::Domain {
                op: "slice_cols",
                detail: format!("cols {start}..{} out of {}", start + len, t.cols()),
            });
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, out);
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(x), &[x])
    }

    /// Row-wise log-sum-exp, `m×n -> m×1`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = (0..t.rows()).map(|r| log_sum_exp(t.row(r))).collect();
        let rows = out.len();
        self.push(Tensor::matrix(rows, 1, out), Op::LogSumExpRows(x), &[x])
    }

    /// Averages each consecutive group of `block` rows into one row.
    pub fn mean_pool_blocks(&mut self, x: Var, block: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if block == 0 || !t.rows().is_multiple_of(block) {
            return Err(TensorError::Domain {
                op: "mean_pool",
                detail: format!("{} rows not divisible into blocks of {block}", t.rows()),
            });
        }
        let c = t.cols();
        let groups = t.rows() / block;
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            for r in 0..block {
                for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(t.row(g * block + r)) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / block as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(
            Tensor::matrix(groups, c, out),
            Op::MeanPoolBlocks(x, block),
            &[x],
        ))
    }

    /// Averages all rows into a single `1×cols` row.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let rows = self.value(x).rows();
        self.mean_pool_blocks(x, rows)
    }

    /// Per-row layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let c = t.cols();
        for p in [gamma, beta] {
            let tp = self.value(p);
            if tp.rows() != 1 || tp.cols() != c {
                return Err(shape_err("layer_norm", t, tp));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; t.rows()];
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normed[r * c + j] = n;
                out[r * c + j] = n * g[j] + b[j];
            }
        }
        let out = Tensor::matrix(t.rows(), c, out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scales each row to unit Euclidean norm; a zero row is an error naming it.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::Domain {
                    op: "l2_normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            norms.push(n);
        }
        let c = t.cols();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v /= norms[i / c];
        }
        Ok(self.push(out, Op::L2NormalizeRows(x, norms), &[x]))
    }

    /// Multi-head scaled dot-product attention over independent row blocks.
    ///
    /// Queries are split into blocks of `q_block` rows (one block per sample).
    /// Keys/values hold either one shared block of `k_block` rows or one block
    /// per sample. Heads slice the feature axis; logits are scaled by
    /// `1/sqrt(head width)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_block: usize,
        k_block: usize,
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tv.shape() != tk.shape() {
            return Err(shape_err("attention", tk, tv));
        }
        let weights = attention_weights(tq, tk, heads, q_block, k_block)?;
        let width = tq.cols();
        let dk = width / heads;
        let batches = tq.rows() / q_block;
        let shared = tk.rows() == k_block;
        let mut out = vec![0.0; tq.rows() * width];
        for b in 0..batches {
            let k_off = if shared { 0 } else { b * k_block };
            for h in 0..heads {
                let base = (b * heads + h) * q_block * k_block;
                for i in 0..q_block {
                    let orow = &mut out[(b * q_block + i) * width + h * dk..][..dk];
                    for j in 0..k_block {
                        let a = weights[base + i * k_block + j];
                        let vj = &tv.row(k_off + j)[h * dk..(h + 1) * dk];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(tq.rows(), width, out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_block,
                k_block,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Pairwise row distances within aligned blocks.
    ///
    /// `a` and `b` are both `(batches·block)×h`; output is `(batches·block)×block`
    /// with entry `(b·block + i, j) = cost(a_{b,i}, b_{b,j})`.
    pub fn pairwise_cost(
        &mut self,
        a: Var,
        b: Var,
        block: usize,
        cost: PairwiseCost,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || block == 0 || ta.rows() % block != 0 {
            return Err(shape_err("pairwise_cost", ta, tb));
        }
        let batches = ta.rows() / block;
        let mut out = vec![0.0; ta.rows() * block];
        for g in 0..batches {
            for i in 0..block {
                let ai = ta.row(g * block + i);
                for j in 0..block {
                    let bj = tb.row(g * block + j);
                    out[(g * block + i) * block + j] = match cost {
                        PairwiseCost::SquaredEuclidean => {
                            ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum()
                        }
                        PairwiseCost::Absolute => ai.iter().zip(bj).map(|(x, y)| (x - y).abs()).sum(),
                    };
                }
            }
        }
        let rows = ta.rows();
        Ok(self.push(
            Tensor::matrix(rows, block, out),
            Op::Pairwise { a, b, block, cost },
            &[a, b],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(TensorError::Domain {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", rt.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(rt.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x / y));
                let gb = Tensor::matrix(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gv, (x, y))| -gv * x / (y * y))
                        .collect(),
                );
                self.accumulate(grads, *b, gb.reshape(g.shape().to_vec())?);
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gr[i % c] += v;
                }
                self.accumulate(grads, *r, Tensor::matrix(1, c, gr));
            }
            Op::AddCol(x, c) => {
                self.accumulate(grads, *x, g.clone());
                let rows: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                let n = rows.len();
                self.accumulate(grads, *c, Tensor::matrix(n, 1, rows));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::ClampMin(x, lo) => {
                let tx = self.value(*x);
                let gx = g.zip_map(tx, |gv, xv| if xv > *lo { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Unary(x, kind) => {
                let tx = self.value(*x);
                let ty = &node.value;
                let mut out = g.clone();
                for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(tx.data()).zip(ty.data()) {
                    let d = match kind {
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Gelu => gelu_parts(xv).1,
                        Unary::Exp => yv,
                        Unary::Ln => 1.0 / xv,
                        Unary::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xv,
                        Unary::SmoothL1 => {
                            if xv.abs() < 1.0 {
                                xv
                            } else {
                                xv.signum()
                            }
                        }
                    };
                    *o *= d;
                }
                self.accumulate(grads, *x, out);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        gp.extend_from_slice(&g.row(r)[off..off + w]);
                    }
                    self.accumulate(grads, p, Tensor::matrix(g.rows(), w, gp));
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let gp = g.slice_rows(off, rows).reshape(self.value(p).shape().to_vec())?;
                    self.accumulate(grads, p, gp);
                    off += rows;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(tx.shape());
                let c = tx.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(tx.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    for j in 0..w {
                        gx.set(r, start + j, g.get(r, j));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for j in 0..c {
                        let p = y.get(r, j).exp();
                        gx.data_mut()[r * c + j] = g.get(r, j) - p * gsum;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSumExpRows(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for r in 0..tx.rows() {
                    let lse = node.value.data()[r];
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = g.data()[r] * (tx.get(r, j) - lse).exp();
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanPoolBlocks(x, block) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let inv = 1.0 / *block as f64;
                let mut gx = Tensor::zeros(tx.shape());
                for r in 0..tx.rows() {
                    let gr = g.row(r / block);
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = gr[j] * inv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let c = g.cols();
                let rows = g.rows();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            let gv = g.get(r, j);
                            gg[j] += gv * normed[r * c + j];
                            gb[j] += gv;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::matrix(1, c, gg));
                    self.accumulate(grads, *beta, Tensor::matrix(1, c, gb));
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for j in 0..c {
                            let d = g.get(r, j) * gam[j];
                            mean_d += d;
                            mean_dn += d * normed[r * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dn /= c as f64;
                        for j in 0..c {
                            let d = g.get(r, j) * gam[j];
                            gx.data_mut()[r * c + j] =
                                inv_std[r] * (d - mean_d - normed[r * c + j] * mean_dn);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::L2NormalizeRows(x, norms) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_block,
                k_block,
                weights,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (heads, q_block, k_block) = (*heads, *q_block, *k_block);
                let width = tq.cols();
                let dk = width / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let batches = tq.rows() / q_block;
                let shared = tk.rows() == k_block;
                let mut gq = Tensor::zeros(tq.shape());
                let mut gk = Tensor::zeros(tk.shape());
                let mut gv = Tensor::zeros(tv.shape());
                let mut dlogit = vec![0.0; k_block];
                for b in 0..batches {
                    let k_off = if shared { 0 } else { b * k_block };
                    for h in 0..heads {
                        let base = (b * heads + h) * q_block * k_block;
                        let cols = h * dk..(h + 1) * dk;
                        for i in 0..q_block {
                            let qrow = b * q_block + i;
                            let go = &g.row(qrow)[cols.clone()];
                            let a = &weights[base + i * k_block..base + (i + 1) * k_block];
                            let mut dot = 0.0;
                            for j in 0..k_block {
                                let vj = &tv.row(k_off + j)[cols.clone()];
                                let da: f64 = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dlogit[j] = da;
                                dot += da * a[j];
                                let gvr = &mut gv.data_mut()[(k_off + j) * width..][cols.clone()];
                                for (o, x) in gvr.iter_mut().zip(go) {
                                    *o += a[j] * x;
                                }
                            }
                            for j in 0..k_block {
                                let ds = a[j] * (dlogit[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &tk.row(k_off + j)[cols.clone()];
                                let gqr = &mut gq.data_mut()[qrow * width..][cols.clone()];
                                for (o, x) in gqr.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let qi = &tq.row(qrow)[cols.clone()];
                                let gkr = &mut gk.data_mut()[(k_off + j) * width..][cols.clone()];
                                for (o, x) in gkr.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::Pairwise { a, b, block, cost } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let block = *block;
                let h = ta.cols();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for grp in 0..ta.rows() / block {
                    for i in 0..block {
                        let ri = grp * block + i;
                        for j in 0..block {
                            let rj = grp * block + j;
                            let gij = g.get(ri, j);
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..h {
                                let diff = ta.get(ri, t) - tb.get(rj, t);
                                let d = match cost {
                                    PairwiseCost::SquaredEuclidean => 2.0 * diff,
                                    PairwiseCost::Absolute => {
                                        if diff > 0.0 {
                                            1.0
                                        } else if diff < 0.0 {
                                            -1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                };
                                ga.data_mut()[ri * h + t] += gij * d;
                                gb.data_mut()[rj * h + t] -= gij * d;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(tx.shape(), g.item()));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = g.item() / tx.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(tx.shape(), v));
            }
        }
        Ok(())
    }
}
