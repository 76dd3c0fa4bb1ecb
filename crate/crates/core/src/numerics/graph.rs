//! Taped reverse-mode differentiation over rank-2 `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::borrow::Cow;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard used by cosine similarity for vectors with (near-)zero norm.
pub const COSINE_DELTA: f64 = 1e-8;

/// Row-normalization denominators smaller than this (in magnitude) are
/// counted as near-zero diagnostics.
pub const NEAR_ZERO_DENOMINATOR: f64 = 1e-4;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    RowMax(Var, Vec<Option<usize>>),
    Sum(Var),
    SumCols(Var),
    MaskedMeanRows(Var, Vec<bool>, usize),
    CosineRows { a: Var, b: Var, a_norm: Vec<f64>, b_norm: Vec<f64> },
    CumLogForget(Var, Vec<bool>),
    Stabilize(Var, Vec<Option<usize>>),
    RowNormalize(Var, Vec<f64>, Vec<bool>),
    Dropout(Var, Vec<f64>),
    SoftmaxCrossEntropy(Var, Vec<f64>, usize),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Leaves may borrow parameter storage for the lifetime
/// `'a`, so binding a large model does not copy its weights.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    near_zero_denominators: usize,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_of(rows: usize, cols: usize) -> [usize; 2] {
    [rows, cols]
}

fn stable_log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    let z = -x;
    -(z.max(0.0) + (-z.abs()).exp().ln_1p())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `log σ(x)` without overflow.
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    stable_log_sigmoid(x)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_of(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Index into a broadcast operand of shape `(br, bc)` for output position `(r, c)`.
#[inline]
fn bcast_index(r: usize, c: usize, br: usize, bc: usize) -> usize {
    let rr = if br == 1 { 0 } else { r };
    let cc = if bc == 1 { 0 } else { c };
    rr * bc + cc
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), near_zero_denominators: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of valid rows seen by [`Graph::row_normalize`] whose
    /// denominator had magnitude below [`NEAR_ZERO_DENOMINATOR`].
    pub fn near_zero_denominators(&self) -> usize {
        self.near_zero_denominators
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value: Cow::Owned(value), rows, cols, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, [f64]>, shape: &[usize], needs_grad: bool) -> Var {
        let (rows, cols) = match *shape {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => (1, value.len()),
        };
        self.nodes.push(Node { value, rows, cols, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(Cow::Owned(t.into_data()), &shape, false)
    }

    /// Constant leaf borrowing `t`.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape(), false)
    }

    /// Trainable leaf borrowing `t`; gradients w.r.t. it are reported by backward.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape(), true)
    }

    /// Trainable leaf that owns its value.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(Cow::Owned(t.into_data()), &shape, true)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        shape_of(n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.rows, n.cols, n.value.to_vec()).expect("node shape is consistent")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let [r, c] = self.shape(x);
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(out, r, c, op, ng)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let out = transpose_of(self.data(x), r, c);
        let ng = self.needs(x);
        self.push(out, c, r, Op::Transpose(x), ng)
    }

    // ---- elementwise ----------------------------------------------------------

    fn check_bcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let ok = (br == ar || br == 1) && (bc == ac || bc == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(op, &[ar, ac], &[br, bc]))
        }
    }

    /// `a + b`, where `b` may broadcast along rows and/or columns
    /// (shapes `r×c`, `1×c`, `r×1` or `1×1`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_bcast("add", a, b)?;
        let [r, c] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(ad[i * c + j] + bd[bcast_index(i, j, br, bc)]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, r, c, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise `a ⊙ b` with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_bcast("mul", a, b)?;
        let [r, c] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(ad[i * c + j] * bd[bcast_index(i, j, br, bc)]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, r, c, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Elementwise `log σ(x)`, computed as `-softplus(-x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_log_sigmoid, Op::LogSigmoid(x))
    }

    // ---- structural -----------------------------------------------------------

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + width > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, width]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + width]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, r, width, Op::SliceCols(x, start), ng))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        };
        let [r, _] = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let [pr, pc] = self.shape(p);
            if pr != r {
                return Err(Error::shape("concat_cols", &self.shape(first), &[pr, pc]));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.nodes[p.0].cols;
                out.extend_from_slice(&self.data(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, r, total, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks a `1×c` row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if r != 1 {
            return Err(Error::shape("repeat_rows", &[r, c], &[1, c]));
        }
        let out = self.data(x).repeat(n);
        let ng = self.needs(x);
        Ok(self.push(out, n, c, Op::RepeatRows(x), ng))
    }

    // ---- reductions -----------------------------------------------------------

    /// Per-row maximum as an `r×1` column. The gradient flows to the first
    /// maximal entry of each row.
    pub fn row_max(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let d = self.data(x);
        let mut out = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            out.push(best.map_or(f64::NEG_INFINITY, |b| row[b]));
            arg.push(best);
        }
        let ng = self.needs(x);
        self.push(out, r, 1, Op::RowMax(x, arg), ng)
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![s], 1, 1, Op::Sum(x), ng)
    }

    /// Sum across columns, giving an `r×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let d = self.data(x);
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.needs(x);
        self.push(out, r, 1, Op::SumCols(x), ng)
    }

    /// Mean of the rows whose mask entry is set, as a `1×c` row.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let [r, c] = self.shape(x);
        if mask.len() != r {
            return Err(Error::shape("masked_mean_rows", &[r, c], &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let d = self.data(x);
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| mask[i]) {
            for (o, v) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = count as f64;
        out.iter_mut().for_each(|o| *o /= inv);
        let ng = self.needs(x);
        Ok(self.push(out, 1, c, Op::MaskedMeanRows(x, mask.to_vec(), count), ng))
    }

    /// Mean of all rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let [r, _] = self.shape(x);
        self.masked_mean_rows(x, &vec![true; r])
    }

    // ---- similarity -----------------------------------------------------------

    /// Pairwise cosine similarity between the rows of `a` (`n×d`) and the
    /// rows of `b` (`m×d`), giving `n×m`. Norms are clamped below by
    /// [`COSINE_DELTA`], so zero rows give similarity 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, d] = self.shape(a);
        let [m, d2] = self.shape(b);
        if d != d2 {
            return Err(Error::shape("cosine_rows", &[n, d], &[m, d2]));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a_norm: Vec<f64> = (0..n).map(|i| norm(&ad[i * d..(i + 1) * d])).collect();
        let b_norm: Vec<f64> = (0..m).map(|j| norm(&bd[j * d..(j + 1) * d])).collect();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &ad[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &bd[j * d..(j + 1) * d];
                let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                out.push(dot / (a_norm[i].max(COSINE_DELTA) * b_norm[j].max(COSINE_DELTA)));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, n, m, Op::CosineRows { a, b, a_norm, b_norm }, ng))
    }

    // ---- decay machinery ------------------------------------------------------

    /// Cumulative log-forget matrix from per-step forget pre-activations `f`
    /// (length `n`, row or column):
    /// `out[i][j] = Σ_{k=j..=i} log σ(f_k)` for `i ≥ j` with both positions
    /// valid, `-∞` otherwise. Filled in O(n²) from a prefix-sum array.
    pub fn cumulative_log_forget(&mut self, f: Var, pad_mask: &[bool]) -> Result<Var> {
        let [r, c] = self.shape(f);
        let n = r * c;
        if (r != 1 && c != 1) || pad_mask.len() != n {
            return Err(Error::shape("cumulative_log_forget", &[r, c], &[pad_mask.len()]));
        }
        // prefix[k] = Σ_{t<k} log σ(f_t)
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &v in self.data(f) {
            acc += stable_log_sigmoid(v);
            prefix.push(acc);
        }
        let mut out = vec![f64::NEG_INFINITY; n * n];
        for i in (0..n).filter(|&i| pad_mask[i]) {
            for j in (0..=i).filter(|&j| pad_mask[j]) {
                out[i * n + j] = prefix[i + 1] - prefix[j];
            }
        }
        let ng = self.needs(f);
        Ok(self.push(out, n, n, Op::CumLogForget(f, pad_mask.to_vec()), ng))
    }

    /// Row-max stabilized exponential `exp(x[i][j] - max_j x[i][j])`.
    /// Rows with no finite entry produce zeros.
    pub fn stabilize(&mut self, log_d: Var) -> Var {
        let [r, c] = self.shape(log_d);
        let d = self.data(log_d);
        let mut out = vec![0.0; r * c];
        let mut arg = Vec::with_capacity(r);
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if v.is_finite() && best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            if let Some(b) = best {
                let m = row[b];
                for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = (v - m).exp();
                }
            }
            arg.push(best);
        }
        let ng = self.needs(log_d);
        self.push(out, r, c, Op::Stabilize(log_d, arg), ng)
    }

    /// `out[i][j] = x[i][j] / (Σ_k x[i][k] + eps)` on rows where `mask` is set;
    /// other rows are zero. The denominator is the signed row sum.
    pub fn row_normalize(&mut self, x: Var, eps: f64, mask: &[bool]) -> Result<Var> {
        let [r, c] = self.shape(x);
        if mask.len() != r {
            return Err(Error::shape("row_normalize", &[r, c], &[mask.len()]));
        }
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        let mut denoms = Vec::with_capacity(r);
        let mut near_zero = 0;
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let den = row.iter().sum::<f64>() + eps;
            denoms.push(den);
            if !mask[i] {
                continue;
            }
            if den.abs() < NEAR_ZERO_DENOMINATOR {
                near_zero += 1;
            }
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / den;
            }
        }
        self.near_zero_denominators += near_zero;
        let ng = self.needs(x);
        Ok(self.push(out, r, c, Op::RowNormalize(x, denoms, mask.to_vec()), ng))
    }

    // ---- regularization and loss ---------------------------------------------

    /// Inverted dropout: each entry is kept with probability `1 - p` and
    /// scaled by `1 / (1 - p)`. With `train == false` this is the identity
    /// and no node is recorded.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let [r, c] = self.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.needs(x);
        Ok(self.push(out, r, c, Op::Dropout(x, mask), ng))
    }

    /// `-log softmax(logits)[label]` for a single row of logits, with
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let [r, c] = self.shape(logits);
        if r != 1 {
            return Err(Error::shape("softmax_cross_entropy", &[r, c], &[1, c]));
        }
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let z = self.data(logits);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = -(z[label] - m - total.ln());
        let probs = exps.iter().map(|e| e / total).collect();
        let ng = self.needs(logits);
        Ok(self.push(vec![loss], 1, 1, Op::SoftmaxCrossEntropy(logits, probs, label), ng))
    }

    /// Dynamic tanh: `gamma ⊙ tanh(alpha · x) + beta`, with scalar `alpha`
    /// (`1×1`) and per-feature `gamma`, `beta` (`1×d`).
    pub fn dyt(&mut self, x: Var, alpha: Var, gamma: Var, beta: Var) -> Result<Var> {
        let scaled = self.mul(x, alpha)?;
        let t = self.tanh(scaled);
        let g = self.mul(t, gamma)?;
        self.add(g, beta)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every node
    /// that depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let [r, c] = self.shape(loss);
        if r * c != 1 {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| (n.rows, n.cols)).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = cols;
                if self.needs(*a) {
                    let bt = transpose_of(self.data(*b), k, n);
                    self.accumulate(grads, *a, |ga| matmul_into(g, &bt, ga, m, n, k));
                }
                if self.needs(*b) {
                    let at = transpose_of(self.data(*a), m, k);
                    self.accumulate(grads, *b, |gb| matmul_into(&at, g, gb, k, m, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                let [br, bc] = self.shape(*b);
                self.accumulate(grads, *b, |gb| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[bcast_index(i, j, br, bc)] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let [br, bc] = self.shape(*b);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[i * cols + j] * bd[bcast_index(i, j, br, bc)];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[bcast_index(i, j, br, bc)] += g[i * cols + j] * ad[i * cols + j];
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), yv) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *x += d * yv * (1.0 - yv);
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), yv) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *x += d * yv;
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), yv) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *x += d * (1.0 - yv * yv);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let xd = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), xv) in ga.iter_mut().zip(g).zip(xd) {
                        *x += d * stable_sigmoid(-xv);
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = transpose_of(g, rows, cols);
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(&gt).for_each(|(x, d)| *x += d));
            }
            Op::SliceCols(a, start) => {
                let [_, ac] = self.shape(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * ac + start + j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].cols;
                    self.accumulate(grads, p, |gp| {
                        for i in 0..rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::RepeatRows(a) => {
                self.accumulate(grads, *a, |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::RowMax(a, arg) => {
                let [_, ac] = self.shape(*a);
                self.accumulate(grads, *a, |ga| {
                    for (i, best) in arg.iter().enumerate() {
                        if let Some(j) = best {
                            ga[i * ac + j] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::SumCols(a) => {
                let [_, ac] = self.shape(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..rows {
                        ga[i * ac..(i + 1) * ac].iter_mut().for_each(|x| *x += g[i]);
                    }
                });
            }
            Op::MaskedMeanRows(a, mask, count) => {
                let inv = 1.0 / *count as f64;
                self.accumulate(grads, *a, |ga| {
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..cols {
                            ga[i * cols + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::CosineRows { a, b, a_norm, b_norm } => {
                let [n, d] = self.shape(*a);
                let m = cols;
                let (ad, bd) = (self.data(*a), self.data(*b));
                // d cos / d a_i = b_j / (na nb) - cos · a_i / na²   (second term only when ‖a_i‖ > δ)
                self.accumulate(grads, *a, |ga| {
                    for i in 0..n {
                        let na = a_norm[i].max(COSINE_DELTA);
                        let clamped = a_norm[i] <= COSINE_DELTA;
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let nb = b_norm[j].max(COSINE_DELTA);
                            let cos = y[i * m + j];
                            for t in 0..d {
                                let mut dv = bd[j * d + t] / (na * nb);
                                if !clamped {
                                    dv -= cos * ad[i * d + t] / (na * na);
                                }
                                ga[i * d + t] += gij * dv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..m {
                        let nb = b_norm[j].max(COSINE_DELTA);
                        let clamped = b_norm[j] <= COSINE_DELTA;
                        for i in 0..n {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let na = a_norm[i].max(COSINE_DELTA);
                            let cos = y[i * m + j];
                            for t in 0..d {
                                let mut dv = ad[i * d + t] / (na * nb);
                                if !clamped {
                                    dv -= cos * bd[j * d + t] / (nb * nb);
                                }
                                gb[j * d + t] += gij * dv;
                            }
                        }
                    }
                });
            }
            Op::CumLogForget(f, mask) => {
                let n = rows;
                let fd = self.data(*f);
                // d out[i][j] / d logσ(f_k) = 1 for j ≤ k ≤ i, so
                // d logσ(f_k) = Σ_{i ≥ k} Σ_{j ≤ k} g[i][j]  over valid entries.
                let mut row_prefix = vec![0.0; n * n];
                for i in (0..n).filter(|&i| mask[i]) {
                    let mut acc = 0.0;
                    for j in 0..n {
                        if j <= i && mask[j] {
                            acc += g[i * n + j];
                        }
                        row_prefix[i * n + j] = acc;
                    }
                }
                self.accumulate(grads, *f, |gf| {
                    for k in 0..n {
                        let total: f64 = (k..n).filter(|&i| mask[i]).map(|i| row_prefix[i * n + k]).sum();
                        gf[k] += total * stable_sigmoid(-fd[k]);
                    }
                });
            }
            Op::Stabilize(a, arg) => {
                self.accumulate(grads, *a, |ga| {
                    for (i, best) in arg.iter().enumerate() {
                        let Some(b) = best else { continue };
                        let mut through_max = 0.0;
                        for j in 0..cols {
                            let gy = g[i * cols + j] * y[i * cols + j];
                            ga[i * cols + j] += gy;
                            through_max += gy;
                        }
                        ga[i * cols + b] -= through_max;
                    }
                });
            }
            Op::RowNormalize(a, denoms, mask) => {
                let xd = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in (0..rows).filter(|&i| mask[i]) {
                        let den = denoms[i];
                        let row_g = &g[i * cols..(i + 1) * cols];
                        let row_x = &xd[i * cols..(i + 1) * cols];
                        let dot: f64 = row_g.iter().zip(row_x).map(|(a, b)| a * b).sum();
                        let shared = dot / (den * den);
                        for j in 0..cols {
                            ga[i * cols + j] += row_g[j] / den - shared;
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, d), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += d * m;
                    }
                });
            }
            Op::SoftmaxCrossEntropy(a, probs, label) => {
                self.accumulate(grads, *a, |ga| {
                    for (j, p) in probs.iter().enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        ga[j] += g[0] * (p - target);
                    }
                });
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not depend
    /// on a trainable leaf (or was not reached).
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].as_ref().map(|g| Tensor::from_vec(r, c, g.clone()).expect("gradient shape matches node"))
    }

    /// Gradient of `v`, or zeros of the node's shape when it was not reached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        self.get(v).unwrap_or_else(|| Tensor::zeros(r, c))
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}
