use rand::Rng;

use super::{distance_column, pooling_mask, semantic_gate, BlockOutput};
use crate::error::Result;
use crate::mlstm::{
    decay_head, gate_bound, gate_preacts, merge_heads, qkv_project, DecayMatrices, HeadConfig, QkvParams,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{bind_frozen, join, uniform, Dyt, Params};

/// Parameters of the semantic block; `alpha` scales the distance penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct SemParams<T = Tensor> {
    pub qkv: QkvParams<T>,
    pub w_s: T,
    pub b_s: T,
    pub lambda: T,
    pub alpha: T,
    pub dyt: Dyt<T>,
}

impl SemParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, rng: &mut R) -> Self {
        Self {
            qkv: QkvParams::init(cfg.model_dim, cfg, rng),
            w_s: uniform(3 * cfg.head_dim(), cfg.n_heads, gate_bound(cfg), rng),
            b_s: Tensor::zeros(1, cfg.n_heads),
            lambda: Tensor::scalar(1.0),
            alpha: Tensor::scalar(0.1),
            dyt: Dyt::init(cfg.model_dim),
        }
    }
}

impl<T> Params<T> for SemParams<T> {
    type Mapped<U> = SemParams<U>;

    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> SemParams<U> {
        SemParams {
            qkv: self.qkv.map(&join(prefix, "qkv"), f),
            w_s: f(&join(prefix, "w_s"), &self.w_s),
            b_s: f(&join(prefix, "b_s"), &self.b_s),
            lambda: f(&join(prefix, "lambda"), &self.lambda),
            alpha: f(&join(prefix, "alpha"), &self.alpha),
            dyt: self.dyt.map(&join(prefix, "dyt"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        f(&join(prefix, "w_s"), &mut self.w_s);
        f(&join(prefix, "b_s"), &mut self.b_s);
        f(&join(prefix, "lambda"), &mut self.lambda);
        f(&join(prefix, "alpha"), &mut self.alpha);
        self.dyt.visit_mut(&join(prefix, "dyt"), f);
    }
}

/// Semantic block on graph nodes. `a_sem` is the per-head query mean over
/// aspect positions (all valid positions for implicit aspects).
#[allow(clippy::too_many_arguments)]
pub fn sem_block(
    g: &mut Graph<'_>,
    x: Var,
    aspect_mask: &[bool],
    pad_mask: &[bool],
    p: &SemParams<Var>,
    cfg: &HeadConfig,
    mut trace: Option<&mut Vec<DecayMatrices>>,
) -> Result<Var> {
    let dist = g.constant(distance_column(aspect_mask, pad_mask));
    let pool = pooling_mask(aspect_mask, pad_mask);
    let proj = qkv_project(g, x, x, x, &p.qkv, cfg)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (q, k, v) = (proj.q[h], proj.k[h], proj.v[h]);
        let (i, f) = gate_preacts(g, q, k, v, &p.qkv, h)?;
        let a_sem = g.masked_mean_rows(q, pool)?;
        let s = semantic_gate(g, q, a_sem, dist, p.w_s, p.b_s, p.lambda, p.alpha, h)?;
        heads.push(decay_head(g, q, k, v, i, f, &[s], pad_mask, cfg, trace.as_deref_mut())?);
    }
    let merged = merge_heads(g, &heads)?;
    p.dyt.apply(g, merged)
}

/// Evaluates the semantic block on plain tensors.
pub fn sem_forward(
    h_syn: &Tensor,
    aspect_mask: &[bool],
    pad_mask: &[bool],
    params: &SemParams,
    cfg: &HeadConfig,
) -> Result<BlockOutput> {
    cfg.validate()?;
    let mut g = Graph::new();
    let p = bind_frozen(&mut g, params);
    let x = g.constant_ref(h_syn);
    let mut decay = Vec::new();
    let out = sem_block(&mut g, x, aspect_mask, pad_mask, &p, cfg, Some(&mut decay))?;
    Ok(BlockOutput { hidden: g.value(out), decay })
}
