//! Decay machinery shared by every block.
//!
//! Per head, a block turns its query/key/value streams into
//!
//! ```text
//! logF[i][j] = Σ_{k=j..=i} log σ(f_k)            (−∞ above the diagonal)
//! logD[i][j] = logF[i][j] + i_j + Σ extra_j
//! D          = exp(logD − rowmax(logD))
//! C          = (q kᵀ / √d) ⊙ D
//! Ĉ[i][j]    = C[i][j] / (Σ_k C[i][k] + ε)
//! h          = Ĉ · V
//! ```
//!
//! Gates are raw pre-activations added in the log domain; only the forget
//! gate passes through `log σ`. Padded positions are `−∞` in `logF`, which
//! zeroes their rows and columns of `D`, `C` and `Ĉ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{join, uniform, Params};

/// Width, head count and normalization constant of a block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { model_dim: 768, n_heads: 6, eps: 1e-6 }
    }
}

impl HeadConfig {
    pub fn new(model_dim: usize, n_heads: usize) -> Result<Self> {
        let cfg = Self { model_dim, n_heads, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Query/key/value projections plus the per-head input and forget gate
/// weights of one block.
///
/// Gate weights hold one column per head (`3·head_dim × n_heads`) and act on
/// `[q_t ⊕ k_t ⊕ v_t]` of that head.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvParams<T = Tensor> {
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_i: T,
    pub b_i: T,
    pub w_f: T,
    pub b_f: T,
}

impl QkvParams<Tensor> {
    /// Fan-in uniform projections and gates; `b_i = 0`, `b_f = 1`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, cfg: &HeadConfig, rng: &mut R) -> Self {
        let dm = cfg.model_dim;
        let proj = 1.0 / (input_dim as f64).sqrt();
        let gate = gate_bound(cfg);
        Self {
            w_q: uniform(input_dim, dm, proj, rng),
            b_q: Tensor::zeros(1, dm),
            w_k: uniform(input_dim, dm, proj, rng),
            b_k: Tensor::zeros(1, dm),
            w_v: uniform(input_dim, dm, proj, rng),
            b_v: Tensor::zeros(1, dm),
            w_i: uniform(3 * cfg.head_dim(), cfg.n_heads, gate, rng),
            b_i: Tensor::zeros(1, cfg.n_heads),
            w_f: uniform(3 * cfg.head_dim(), cfg.n_heads, gate, rng),
            b_f: Tensor::filled(1, cfg.n_heads, 1.0),
        }
    }

    pub fn zeros(input_dim: usize, cfg: &HeadConfig) -> Self {
        let dm = cfg.model_dim;
        let gate = 3 * cfg.head_dim();
        Self {
            w_q: Tensor::zeros(input_dim, dm),
            b_q: Tensor::zeros(1, dm),
            w_k: Tensor::zeros(input_dim, dm),
            b_k: Tensor::zeros(1, dm),
            w_v: Tensor::zeros(input_dim, dm),
            b_v: Tensor::zeros(1, dm),
            w_i: Tensor::zeros(gate, cfg.n_heads),
            b_i: Tensor::zeros(1, cfg.n_heads),
            w_f: Tensor::zeros(gate, cfg.n_heads),
            b_f: Tensor::zeros(1, cfg.n_heads),
        }
    }
}

/// Init bound `1/√(3·head_dim)` for scalar gate weights.
pub fn gate_bound(cfg: &HeadConfig) -> f64 {
    1.0 / ((3 * cfg.head_dim()) as f64).sqrt()
}

impl<T> Params<T> for QkvParams<T> {
    type Mapped<U> = QkvParams<U>;

    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> QkvParams<U> {
        QkvParams {
            w_q: f(&join(prefix, "w_q"), &self.w_q),
            b_q: f(&join(prefix, "b_q"), &self.b_q),
            w_k: f(&join(prefix, "w_k"), &self.w_k),
            b_k: f(&join(prefix, "b_k"), &self.b_k),
            w_v: f(&join(prefix, "w_v"), &self.w_v),
            b_v: f(&join(prefix, "b_v"), &self.b_v),
            w_i: f(&join(prefix, "w_i"), &self.w_i),
            b_i: f(&join(prefix, "b_i"), &self.b_i),
            w_f: f(&join(prefix, "w_f"), &self.w_f),
            b_f: f(&join(prefix, "b_f"), &self.b_f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "w_q"), &mut self.w_q);
        f(&join(prefix, "b_q"), &mut self.b_q);
        f(&join(prefix, "w_k"), &mut self.w_k);
        f(&join(prefix, "b_k"), &mut self.b_k);
        f(&join(prefix, "w_v"), &mut self.w_v);
        f(&join(prefix, "b_v"), &mut self.b_v);
        f(&join(prefix, "w_i"), &mut self.w_i);
        f(&join(prefix, "b_i"), &mut self.b_i);
        f(&join(prefix, "w_f"), &mut self.w_f);
        f(&join(prefix, "b_f"), &mut self.b_f);
    }
}

/// Per-head `n×head_dim` query, key and value slices.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

/// `q = q_src·W_q + b_q`, `k = (k_src·W_k)/√head_dim + b_k`,
/// `v = v_src·W_v + b_v`, split into contiguous head slices.
pub fn qkv_project(
    g: &mut Graph<'_>,
    q_src: Var,
    k_src: Var,
    v_src: Var,
    p: &QkvParams<Var>,
    cfg: &HeadConfig,
) -> Result<HeadProjections> {
    let hd = cfg.head_dim();
    let qw = g.matmul(q_src, p.w_q)?;
    let q = g.add(qw, p.b_q)?;
    let kw = g.matmul(k_src, p.w_k)?;
    let kw = g.scale(kw, 1.0 / (hd as f64).sqrt());
    let k = g.add(kw, p.b_k)?;
    let vw = g.matmul(v_src, p.w_v)?;
    let v = g.add(vw, p.b_v)?;
    let split = |g: &mut Graph<'_>, x: Var| -> Result<Vec<Var>> {
        (0..cfg.n_heads).map(|h| g.slice_cols(x, h * hd, hd)).collect()
    };
    Ok(HeadProjections { q: split(g, q)?, k: split(g, k)?, v: split(g, v)? })
}

/// Scalar gate of `head`: `x · w[:, head] + b[head]`, where `x` has
/// `3·head_dim` columns. Gives one value per row of `x`.
pub fn head_gate(g: &mut Graph<'_>, x: Var, w: Var, b: Var, head: usize) -> Result<Var> {
    let w_col = g.slice_cols(w, head, 1)?;
    let b_h = g.slice_cols(b, head, 1)?;
    let xw = g.matmul(x, w_col)?;
    g.add(xw, b_h)
}

/// Input and forget gate pre-activations (`n×1` each) from `[q ⊕ k ⊕ v]`.
pub fn gate_preacts(g: &mut Graph<'_>, q: Var, k: Var, v: Var, p: &QkvParams<Var>, head: usize) -> Result<(Var, Var)> {
    let qkv = g.concat_cols(&[q, k, v])?;
    let i = head_gate(g, qkv, p.w_i, p.b_i, head)?;
    let f = head_gate(g, qkv, p.w_f, p.b_f, head)?;
    Ok((i, f))
}

/// Gate term computed from a single pooled `1×head_dim` vector `u`:
/// `w[:, head] · [u ⊕ u ⊕ u] + b[head]`, as `1×1`.
pub fn tripled_gate(g: &mut Graph<'_>, u: Var, w: Var, b: Var, head: usize) -> Result<Var> {
    let uuu = g.concat_cols(&[u, u, u])?;
    head_gate(g, uuu, w, b, head)
}

pub fn cumulative_log_forget(g: &mut Graph<'_>, f: Var, pad_mask: &[bool]) -> Result<Var> {
    g.cumulative_log_forget(f, pad_mask)
}

/// `logD[i][j] = logF[i][j] + input_j + Σ extras_j`. Gates are `n×1`
/// columns; `−∞` entries of `logF` stay `−∞`.
pub fn combine_decay(g: &mut Graph<'_>, log_f: Var, input: Var, extras: &[Var]) -> Result<Var> {
    let [n, _] = g.shape(log_f);
    let mut gates = input;
    for &e in extras {
        let [en, ec] = g.shape(e);
        if en != n || ec != 1 {
            return Err(Error::shape("combine_decay", &[n, 1], &[en, ec]));
        }
        gates = g.add(gates, e)?;
    }
    let row = g.transpose(gates);
    g.add(log_f, row)
}

pub fn stabilize(g: &mut Graph<'_>, log_d: Var) -> Var {
    g.stabilize(log_d)
}

/// `C = (q kᵀ / √head_dim) ⊙ D` and its row-normalized form `Ĉ`.
pub fn combination(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    d: Var,
    cfg: &HeadConfig,
    pad_mask: &[bool],
) -> Result<(Var, Var)> {
    let kt = g.transpose(k);
    let qk = g.matmul(q, kt)?;
    let qk = g.scale(qk, 1.0 / (cfg.head_dim() as f64).sqrt());
    let c = g.mul(qk, d)?;
    let c_hat = g.row_normalize(c, cfg.eps, pad_mask)?;
    Ok((c, c_hat))
}

/// `h = Ĉ · V`.
pub fn retrieve(g: &mut Graph<'_>, c_hat: Var, v: Var) -> Result<Var> {
    g.matmul(c_hat, v)
}

pub fn merge_heads(g: &mut Graph<'_>, heads: &[Var]) -> Result<Var> {
    g.concat_cols(heads)
}

/// Intermediate matrices of one head of one block forward pass.
#[derive(Clone, Debug)]
pub struct DecayMatrices {
    pub log_f: Tensor,
    pub log_d: Tensor,
    pub d: Tensor,
    pub c: Tensor,
    pub c_hat: Tensor,
}

/// Runs `logF → logD → D → C → Ĉ → h` for one head, optionally recording
/// the intermediates.
#[allow(clippy::too_many_arguments)]
pub fn decay_head(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    input_gate: Var,
    forget_gate: Var,
    extras: &[Var],
    pad_mask: &[bool],
    cfg: &HeadConfig,
    trace: Option<&mut Vec<DecayMatrices>>,
) -> Result<Var> {
    let log_f = cumulative_log_forget(g, forget_gate, pad_mask)?;
    let log_d = combine_decay(g, log_f, input_gate, extras)?;
    let d = stabilize(g, log_d);
    let (c, c_hat) = combination(g, q, k, d, cfg, pad_mask)?;
    if let Some(trace) = trace {
        trace.push(DecayMatrices {
            log_f: g.value(log_f),
            log_d: g.value(log_d),
            d: g.value(d),
            c: g.value(c),
            c_hat: g.value(c_hat),
        });
    }
    retrieve(g, c_hat, v)
}
