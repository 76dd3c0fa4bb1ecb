//! The three gated matrix-memory blocks and their decay gates.
//!
//! Each block runs the shared decay pipeline from [`crate::mlstm`] per head,
//! adding its own gate columns to `logD`:
//!
//! | block | q / k / v source                   | extra gates          |
//! |-------|------------------------------------|----------------------|
//! | Fuse  | sentence / image / sentence        | aspect, image        |
//! | Syn   | previous block output              | graph                |
//! | Sem   | previous block output              | semantic             |
//!
//! Every gate is `W[u ⊕ u ⊕ u] + b` for a pooled per-head vector `u`, plus a
//! token-varying similarity term. Gates are computed per head from that
//! head's query slice.

mod fuse;
mod sem;
mod syn;

use serde::{Deserialize, Serialize};

pub use fuse::{fuse_block, fuse_forward, FuseParams};
pub use sem::{sem_block, sem_forward, SemParams};
pub use syn::{syn_block, syn_forward, SynParams};

use crate::error::Result;
use crate::mlstm::{tripled_gate, DecayMatrices};
use crate::numerics::{Graph, Tensor, Var};

/// How the graph gate turns the adjacency-weighted similarity matrix into
/// one value per token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Degree-normalized row sum of `A ⊙ cos(q, q)`.
    #[default]
    RowAggregate,
    /// The diagonal of `A ⊙ cos(q, q)`, which is the self-loop weight `A_tt`.
    LiteralDiag,
}

impl GraphMode {
    pub fn code(self) -> u32 {
        match self {
            GraphMode::RowAggregate => 0,
            GraphMode::LiteralDiag => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(GraphMode::RowAggregate),
            1 => Some(GraphMode::LiteralDiag),
            _ => None,
        }
    }
}

/// Output of a block evaluated outside a training graph.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// `n × model_dim` after DyT.
    pub hidden: Tensor,
    /// One entry per head.
    pub decay: Vec<DecayMatrices>,
}

/// `w[:, head]·[u ⊕ u ⊕ u] + b[head] + λ·cos(q_t, u)` as an `n×1` column.
///
/// Shared by the aspect and image gates, which differ only in `u` and the
/// weights used.
#[allow(clippy::too_many_arguments)]
pub fn pooled_similarity_gate(
    g: &mut Graph<'_>,
    q: Var,
    u: Var,
    w: Var,
    b: Var,
    lambda: Var,
    head: usize,
) -> Result<Var> {
    let constant = tripled_gate(g, u, w, b, head)?;
    let cos = g.cosine_rows(q, u)?;
    let sim = g.mul(cos, lambda)?;
    g.add(sim, constant)
}

/// Aspect gate `a_t = W_a[H_A ⊕ H_A ⊕ H_A] + b_a + λ·cos(q_t, H_A)`.
pub fn aspect_gate(g: &mut Graph<'_>, q: Var, h_a: Var, w_a: Var, b_a: Var, lambda: Var, head: usize) -> Result<Var> {
    pooled_similarity_gate(g, q, h_a, w_a, b_a, lambda, head)
}

/// Image gate `im_t = W_im[H_I ⊕ H_I ⊕ H_I] + b_im + λ·cos(q_t, H_I)`.
pub fn image_gate(g: &mut Graph<'_>, q: Var, h_i: Var, w_im: Var, b_im: Var, lambda: Var, head: usize) -> Result<Var> {
    pooled_similarity_gate(g, q, h_i, w_im, b_im, lambda, head)
}

/// Adjacency-derived constants shared by all heads of a Syn block.
#[derive(Clone, Copy, Debug)]
pub struct GraphStructure {
    /// `A`, zero on padded rows and columns.
    pub adjacency: Var,
    /// `D⁻¹A`; padded rows are zero.
    pub normalized: Var,
    /// `1/deg_t` as `n×1`, zero at padded positions.
    pub inv_degree: Var,
    /// `A_tt` as `n×1`.
    pub self_loops: Var,
}

impl GraphStructure {
    pub fn new(g: &mut Graph<'_>, adjacency: &Tensor, pad_mask: &[bool]) -> Self {
        let n = pad_mask.len();
        let mut masked = Tensor::zeros(n, n);
        let mut inv = vec![0.0; n];
        let mut diag = vec![0.0; n];
        for i in (0..n).filter(|&i| pad_mask[i]) {
            for j in (0..n).filter(|&j| pad_mask[j]) {
                masked.set(i, j, adjacency.get(i, j));
            }
            let deg: f64 = masked.row(i).iter().sum();
            inv[i] = if deg > 0.0 { 1.0 / deg } else { 0.0 };
            diag[i] = masked.get(i, i);
        }
        let mut normalized = masked.clone();
        for (i, &s) in inv.iter().enumerate() {
            for j in 0..n {
                let v = normalized.get(i, j) * s;
                normalized.set(i, j, v);
            }
        }
        Self {
            adjacency: g.constant(masked),
            normalized: g.constant(normalized),
            inv_degree: g.constant(Tensor::column_vector(inv)),
            self_loops: g.constant(Tensor::column_vector(diag)),
        }
    }
}

/// Per-token graph signal `diagG` (`n×1`).
pub fn graph_signal(g: &mut Graph<'_>, q: Var, graph: &GraphStructure, mode: GraphMode) -> Result<Var> {
    match mode {
        GraphMode::LiteralDiag => Ok(graph.self_loops),
        GraphMode::RowAggregate => {
            let cos = g.cosine_rows(q, q)?;
            let weighted = g.mul(cos, graph.adjacency)?;
            let sums = g.sum_cols(weighted);
            g.mul(sums, graph.inv_degree)
        }
    }
}

/// Mask used for aspect pooling: the aspect positions, or every valid
/// position when the aspect is implicit.
pub fn pooling_mask<'m>(aspect_mask: &'m [bool], pad_mask: &'m [bool]) -> &'m [bool] {
    if aspect_mask.iter().any(|&m| m) {
        aspect_mask
    } else {
        pad_mask
    }
}

/// Syntax-aware aspect embedding: one step of degree-normalized adjacency
/// smoothing of `q`, then the mean over aspect positions (`1×head_dim`).
pub fn syn_aspect_embed(
    g: &mut Graph<'_>,
    q: Var,
    graph: &GraphStructure,
    aspect_mask: &[bool],
    pad_mask: &[bool],
) -> Result<Var> {
    let smoothed = g.matmul(graph.normalized, q)?;
    g.masked_mean_rows(smoothed, pooling_mask(aspect_mask, pad_mask))
}

/// Graph gate `g_t = W_g[a_syn ⊕ a_syn ⊕ a_syn] + b_g + γ·diagG_t`.
pub fn graph_gate(
    g: &mut Graph<'_>,
    a_syn: Var,
    diag_g: Var,
    w_g: Var,
    b_g: Var,
    gamma: Var,
    head: usize,
) -> Result<Var> {
    let constant = tripled_gate(g, a_syn, w_g, b_g, head)?;
    let scaled = g.mul(diag_g, gamma)?;
    g.add(scaled, constant)
}

/// Semantic gate
/// `s_t = W_s[a_sem ⊕ a_sem ⊕ a_sem] + b_s + λ·cos(q_t, a_sem) − α·dist_t`.
#[allow(clippy::too_many_arguments)]
pub fn semantic_gate(
    g: &mut Graph<'_>,
    q: Var,
    a_sem: Var,
    dist: Var,
    w_s: Var,
    b_s: Var,
    lambda: Var,
    alpha: Var,
    head: usize,
) -> Result<Var> {
    let base = pooled_similarity_gate(g, q, a_sem, w_s, b_s, lambda, head)?;
    let penalty = g.mul(dist, alpha)?;
    g.sub(base, penalty)
}

/// Distance from `t` to the nearest aspect position, divided by `n_valid`.
/// Zero for implicit aspects.
pub fn dist(t: usize, aspect_mask: &[bool], n_valid: usize) -> f64 {
    aspect_mask
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m)
        .map(|(p, _)| t.abs_diff(p))
        .min()
        .map_or(0.0, |d| d as f64 / n_valid.max(1) as f64)
}

/// [`dist`] for every position as an `n×1` column; padded positions get 0.
pub fn distance_column(aspect_mask: &[bool], pad_mask: &[bool]) -> Tensor {
    let n_valid = pad_mask.iter().filter(|&&m| m).count();
    Tensor::column_vector(
        (0..pad_mask.len()).map(|t| if pad_mask[t] { dist(t, aspect_mask, n_valid) } else { 0.0 }).collect(),
    )
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        dot / (na * nb)
    }

    fn chain(n: usize) -> Tensor {
        crate::feature_io::adjacency_from_edges(n, &(1..n).map(|t| (t - 1, t)).collect::<Vec<_>>())
    }

    #[test]
    fn aspect_gate_with_zero_lambda_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, 5, 3));
        let u = g.constant(rand_tensor(&mut rng, 1, 3));
        let w = g.constant(rand_tensor(&mut rng, 9, 2));
        let b = g.constant(rand_tensor(&mut rng, 1, 2));
        let lambda = g.constant(Tensor::scalar(0.0));
        let a = aspect_gate(&mut g, q, u, w, b, lambda, 1).unwrap();
        let v = g.data(a);
        assert!(v.iter().all(|&x| x == v[0]));
    }

    #[test]
    fn aspect_gate_aligned_query_gives_lambda() {
        let mut g = Graph::new();
        let u = Tensor::row_vector(vec![1.0, -2.0, 0.5]);
        let q = g.constant(Tensor::from_rows(&[vec![2.0, -4.0, 1.0], vec![0.5, -1.0, 0.25]]).unwrap());
        let uv = g.constant(u);
        let w = g.constant(Tensor::zeros(9, 1));
        let b = g.constant(Tensor::zeros(1, 1));
        let lambda = g.constant(Tensor::scalar(2.0));
        let a = aspect_gate(&mut g, q, uv, w, b, lambda, 0).unwrap();
        for &x in g.data(a) {
            assert!((x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_match_naive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, hd, heads) = (6, 3, 2);
        let qt = rand_tensor(&mut rng, n, hd);
        let ut = rand_tensor(&mut rng, 1, hd);
        let wt = rand_tensor(&mut rng, 3 * hd, heads);
        let bt = rand_tensor(&mut rng, 1, heads);
        let (lam, alpha) = (0.7, 0.3);
        let dist_v: Vec<f64> = (0..n).map(|t| t as f64 / n as f64).collect();

        let mut g = Graph::new();
        let q = g.constant(qt.clone());
        let u = g.constant(ut.clone());
        let w = g.constant(wt.clone());
        let b = g.constant(bt.clone());
        let l = g.constant(Tensor::scalar(lam));
        let al = g.constant(Tensor::scalar(alpha));
        let d = g.constant(Tensor::column_vector(dist_v.clone()));
        let head = 1;
        let im = image_gate(&mut g, q, u, w, b, l, head).unwrap();
        let s = semantic_gate(&mut g, q, u, d, w, b, l, al, head).unwrap();

        let constant: f64 = (0..3 * hd).map(|r| wt.get(r, head) * ut.data()[r % hd]).sum::<f64>() + bt.data()[head];
        for (t, dist_t) in dist_v.iter().enumerate() {
            let cos = naive_cos(qt.row(t), ut.data());
            let want_im = constant + lam * cos;
            let want_s = want_im - alpha * dist_t;
            assert!((g.data(im)[t] - want_im).abs() < 1e-12);
            assert!((g.data(s)[t] - want_s).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_image_vector_leaves_only_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, 4, 2));
        let u = g.constant(Tensor::zeros(1, 2));
        let w = g.constant(rand_tensor(&mut rng, 6, 1));
        let b = g.constant(Tensor::scalar(0.42));
        let l = g.constant(Tensor::scalar(1.0));
        let im = image_gate(&mut g, q, u, w, b, l, 0).unwrap();
        assert!(g.data(im).iter().all(|&x| x == 0.42));
    }

    #[test]
    fn graph_signal_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, 4, 3));
        let pad = [true; 4];
        let gs = GraphStructure::new(&mut g, &chain(4), &pad);
        let lit = graph_signal(&mut g, q, &gs, GraphMode::LiteralDiag).unwrap();
        assert_eq!(g.data(lit), &[1.0; 4]);

        let eye = GraphStructure::new(&mut g, &Tensor::identity(4), &pad);
        let agg = graph_signal(&mut g, q, &eye, GraphMode::RowAggregate).unwrap();
        for &x in g.data(agg) {
            assert!((x - 1.0).abs() < 1e-12);
        }

        // Chain of three with q = [1,0], [1,1], [0,1]; cos(q0,q1) = cos(q1,q2) = 1/√2.
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let gs = GraphStructure::new(&mut g, &chain(3), &[true; 3]);
        let agg = graph_signal(&mut g, q, &gs, GraphMode::RowAggregate).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let want = [(1.0 + r) / 2.0, (1.0 + 2.0 * r) / 3.0, (1.0 + r) / 2.0];
        for (got, want) in g.data(agg).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn syn_aspect_embed_examples() {
        let mut g = Graph::new();
        let qt = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 3.0], vec![0.0, 6.0]]).unwrap();
        let q = g.constant(qt.clone());
        let pad = [true; 3];
        let eye = GraphStructure::new(&mut g, &Tensor::identity(3), &pad);
        let one = syn_aspect_embed(&mut g, q, &eye, &[false, true, false], &pad).unwrap();
        assert_eq!(g.data(one), qt.row(1));
        let two = syn_aspect_embed(&mut g, q, &eye, &[true, false, true], &pad).unwrap();
        assert_eq!(g.data(two), &[0.5, 3.0]);

        // Chain: row 1 averages all three tokens.
        let ch = GraphStructure::new(&mut g, &chain(3), &pad);
        let mid = syn_aspect_embed(&mut g, q, &ch, &[false, true, false], &pad).unwrap();
        assert!((g.data(mid)[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((g.data(mid)[1] - 3.0).abs() < 1e-12);
        // Implicit aspect pools every valid smoothed row.
        let all = syn_aspect_embed(&mut g, q, &ch, &[false; 3], &pad).unwrap();
        let want0 = (2.0 + 4.0 / 3.0 + 1.5) / 3.0;
        assert!((g.data(all)[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn graph_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, 1, 2));
        let diag = g.constant(rand_tensor(&mut rng, 4, 1));
        let w = g.constant(rand_tensor(&mut rng, 6, 1));
        let b = g.constant(rand_tensor(&mut rng, 1, 1));
        let zero = g.constant(Tensor::scalar(0.0));
        let out = graph_gate(&mut g, a, diag, w, b, zero, 0).unwrap();
        let v = g.data(out);
        assert!(v.iter().all(|&x| x == v[0]));

        let q = g.constant(rand_tensor(&mut rng, 4, 2));
        let gs = GraphStructure::new(&mut g, &chain(4), &[true; 4]);
        let lit = graph_signal(&mut g, q, &gs, GraphMode::LiteralDiag).unwrap();
        let wz = g.constant(Tensor::zeros(6, 1));
        let bz = g.constant(Tensor::zeros(1, 1));
        let gamma = g.constant(Tensor::scalar(1.7));
        let out = graph_gate(&mut g, a, lit, wz, bz, gamma, 0).unwrap();
        assert!(g.data(out).iter().all(|&x| x == 1.7));
    }

    #[test]
    fn semantic_gate_constant_without_similarity_or_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, 5, 2));
        let a = g.constant(rand_tensor(&mut rng, 1, 2));
        let d = g.constant(distance_column(&[false, false, true, false, false], &[true; 5]));
        let w = g.constant(rand_tensor(&mut rng, 6, 1));
        let b = g.constant(rand_tensor(&mut rng, 1, 1));
        let zero = g.constant(Tensor::scalar(0.0));
        let s = semantic_gate(&mut g, q, a, d, w, b, zero, zero, 0).unwrap();
        let v = g.data(s);
        assert!(v.iter().all(|&x| x == v[0]));
    }

    #[test]
    fn dist_examples() {
        let mask = [false, true, false, false, true, false];
        assert_eq!(dist(1, &mask, 6), 0.0);
        assert_eq!(dist(4, &mask, 6), 0.0);
        assert!((dist(2, &mask, 6) - 1.0 / 6.0).abs() < 1e-15);
        let first = [true, false, false, false, false];
        assert!((dist(4, &first, 5) - 4.0 / 5.0).abs() < 1e-15);
        assert_eq!(dist(3, &[false; 5], 5), 0.0);
        let col = distance_column(&[true, false, false], &[true, true, false]);
        assert_eq!(col.data(), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn graph_mode_codes_round_trip() {
        for m in [GraphMode::RowAggregate, GraphMode::LiteralDiag] {
            assert_eq!(GraphMode::from_code(m.code()), Some(m));
        }
        assert_eq!(GraphMode::from_code(9), None);
        assert_eq!(serde_json::to_string(&GraphMode::LiteralDiag).unwrap(), "\"literal_diag\"");
    }
}
