use rand::Rng;

use super::{aspect_gate, image_gate, BlockOutput};
use crate::encoder::ModelInputs;
use crate::error::Result;
use crate::mlstm::{
    decay_head, gate_bound, gate_preacts, merge_heads, qkv_project, DecayMatrices, HeadConfig, QkvParams,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{bind_frozen, join, uniform, Dyt, Params};

/// Parameters of the multimodal fusion block. `lambda` scales the cosine
/// term of both the aspect and the image gate.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseParams<T = Tensor> {
    pub qkv: QkvParams<T>,
    pub w_a: T,
    pub b_a: T,
    pub w_im: T,
    pub b_im: T,
    pub lambda: T,
    pub dyt: Dyt<T>,
}

impl FuseParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, rng: &mut R) -> Self {
        let (gate_in, h) = (3 * cfg.head_dim(), cfg.n_heads);
        let bound = gate_bound(cfg);
        Self {
            qkv: QkvParams::init(cfg.model_dim, cfg, rng),
            w_a: uniform(gate_in, h, bound, rng),
            b_a: Tensor::zeros(1, h),
            w_im: uniform(gate_in, h, bound, rng),
            b_im: Tensor::zeros(1, h),
            lambda: Tensor::scalar(1.0),
            dyt: Dyt::init(cfg.model_dim),
        }
    }
}

impl<T> Params<T> for FuseParams<T> {
    type Mapped<U> = FuseParams<U>;

    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> FuseParams<U> {
        FuseParams {
            qkv: self.qkv.map(&join(prefix, "qkv"), f),
            w_a: f(&join(prefix, "w_a"), &self.w_a),
            b_a: f(&join(prefix, "b_a"), &self.b_a),
            w_im: f(&join(prefix, "w_im"), &self.w_im),
            b_im: f(&join(prefix, "b_im"), &self.b_im),
            lambda: f(&join(prefix, "lambda"), &self.lambda),
            dyt: self.dyt.map(&join(prefix, "dyt"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        f(&join(prefix, "w_a"), &mut self.w_a);
        f(&join(prefix, "b_a"), &mut self.b_a);
        f(&join(prefix, "w_im"), &mut self.w_im);
        f(&join(prefix, "b_im"), &mut self.b_im);
        f(&join(prefix, "lambda"), &mut self.lambda);
        self.dyt.visit_mut(&join(prefix, "dyt"), f);
    }
}

/// Fusion block on graph nodes. `sentence` is `n×model_dim`; `aspect` and
/// `image` are the pooled `1×model_dim` rows. Returns the DyT output.
///
/// Queries and values come from the sentence, keys from the broadcast image.
#[allow(clippy::too_many_arguments)]
pub fn fuse_block(
    g: &mut Graph<'_>,
    sentence: Var,
    aspect: Var,
    image: Var,
    pad_mask: &[bool],
    p: &FuseParams<Var>,
    cfg: &HeadConfig,
    mut trace: Option<&mut Vec<DecayMatrices>>,
) -> Result<Var> {
    let hd = cfg.head_dim();
    let image_bcast = g.repeat_rows(image, pad_mask.len())?;
    let proj = qkv_project(g, sentence, image_bcast, sentence, &p.qkv, cfg)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (q, k, v) = (proj.q[h], proj.k[h], proj.v[h]);
        let (i, f) = gate_preacts(g, q, k, v, &p.qkv, h)?;
        let h_a = g.slice_cols(aspect, h * hd, hd)?;
        let h_i = g.slice_cols(image, h * hd, hd)?;
        let a = aspect_gate(g, q, h_a, p.w_a, p.b_a, p.lambda, h)?;
        let im = image_gate(g, q, h_i, p.w_im, p.b_im, p.lambda, h)?;
        heads.push(decay_head(g, q, k, v, i, f, &[a, im], pad_mask, cfg, trace.as_deref_mut())?);
    }
    let merged = merge_heads(g, &heads)?;
    p.dyt.apply(g, merged)
}

/// Evaluates the fusion block on plain tensors.
pub fn fuse_forward(inputs: &ModelInputs, params: &FuseParams, cfg: &HeadConfig) -> Result<BlockOutput> {
    cfg.validate()?;
    let aspect = inputs.aspect_row();
    let image = inputs.image_row();
    let mut g = Graph::new();
    let p = bind_frozen(&mut g, params);
    let s = g.constant_ref(&inputs.sentence);
    let a = g.constant_ref(&aspect);
    let i = g.constant_ref(&image);
    let mut decay = Vec::new();
    let out = fuse_block(&mut g, s, a, i, &inputs.pad_mask, &p, cfg, Some(&mut decay))?;
    Ok(BlockOutput { hidden: g.value(out), decay })
}
