use rand::Rng;

use super::{graph_gate, graph_signal, syn_aspect_embed, BlockOutput, GraphMode, GraphStructure};
use crate::error::Result;
use crate::mlstm::{
    decay_head, gate_bound, gate_preacts, merge_heads, qkv_project, DecayMatrices, HeadConfig, QkvParams,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{bind_frozen, join, uniform, Dyt, Params};

/// Parameters of the syntax block. `graph_mode` is configuration, not a
/// trainable leaf, and is carried through [`Params::map`] unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct SynParams<T = Tensor> {
    pub qkv: QkvParams<T>,
    pub w_g: T,
    pub b_g: T,
    pub gamma: T,
    pub graph_mode: GraphMode,
    pub dyt: Dyt<T>,
}

impl SynParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, graph_mode: GraphMode, rng: &mut R) -> Self {
        Self {
            qkv: QkvParams::init(cfg.model_dim, cfg, rng),
            w_g: uniform(3 * cfg.head_dim(), cfg.n_heads, gate_bound(cfg), rng),
            b_g: Tensor::zeros(1, cfg.n_heads),
            gamma: Tensor::scalar(1.0),
            graph_mode,
            dyt: Dyt::init(cfg.model_dim),
        }
    }
}

impl<T> Params<T> for SynParams<T> {
    type Mapped<U> = SynParams<U>;

    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> SynParams<U> {
        SynParams {
            qkv: self.qkv.map(&join(prefix, "qkv"), f),
            w_g: f(&join(prefix, "w_g"), &self.w_g),
            b_g: f(&join(prefix, "b_g"), &self.b_g),
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            graph_mode: self.graph_mode,
            dyt: self.dyt.map(&join(prefix, "dyt"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        f(&join(prefix, "w_g"), &mut self.w_g);
        f(&join(prefix, "b_g"), &mut self.b_g);
        f(&join(prefix, "gamma"), &mut self.gamma);
        self.dyt.visit_mut(&join(prefix, "dyt"), f);
    }
}

/// Syntax block on graph nodes; `x` is the previous block's `n×model_dim`
/// output. Returns the DyT output.
#[allow(clippy::too_many_arguments)]
pub fn syn_block(
    g: &mut Graph<'_>,
    x: Var,
    adjacency: &Tensor,
    aspect_mask: &[bool],
    pad_mask: &[bool],
    p: &SynParams<Var>,
    cfg: &HeadConfig,
    mut trace: Option<&mut Vec<DecayMatrices>>,
) -> Result<Var> {
    let graph = GraphStructure::new(g, adjacency, pad_mask);
    let proj = qkv_project(g, x, x, x, &p.qkv, cfg)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (q, k, v) = (proj.q[h], proj.k[h], proj.v[h]);
        let (i, f) = gate_preacts(g, q, k, v, &p.qkv, h)?;
        let diag = graph_signal(g, q, &graph, p.graph_mode)?;
        let a_syn = syn_aspect_embed(g, q, &graph, aspect_mask, pad_mask)?;
        let gate = graph_gate(g, a_syn, diag, p.w_g, p.b_g, p.gamma, h)?;
        heads.push(decay_head(g, q, k, v, i, f, &[gate], pad_mask, cfg, trace.as_deref_mut())?);
    }
    let merged = merge_heads(g, &heads)?;
    p.dyt.apply(g, merged)
}

/// Evaluates the syntax block on plain tensors.
pub fn syn_forward(
    h_fuse: &Tensor,
    adjacency: &Tensor,
    aspect_mask: &[bool],
    pad_mask: &[bool],
    params: &SynParams,
    cfg: &HeadConfig,
) -> Result<BlockOutput> {
    cfg.validate()?;
    let mut g = Graph::new();
    let p = bind_frozen(&mut g, params);
    let x = g.constant_ref(h_fuse);
    let mut decay = Vec::new();
    let out = syn_block(&mut g, x, adjacency, aspect_mask, pad_mask, &p, cfg, Some(&mut decay))?;
    Ok(BlockOutput { hidden: g.value(out), decay })
}
