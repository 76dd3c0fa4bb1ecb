//! Dense tensors and reverse-mode differentiation.

mod graph;
mod tensor;

pub use graph::{log_sigmoid_scalar, Gradients, Graph, Var, COSINE_DELTA, NEAR_ZERO_DENOMINATOR};
pub use tensor::Tensor;

/// Cosine similarity of two equal-length vectors with norms clamped below by
/// [`COSINE_DELTA`]; zero vectors give 0.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> crate::Result<f64> {
    if u.len() != v.len() {
        return Err(crate::Error::Shape { op: "cosine_sim", left: vec![u.len()], right: vec![v.len()] });
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(u.to_vec()));
    let b = g.constant(Tensor::row_vector(v.to_vec()));
    let c = g.cosine_rows(a, b)?;
    Ok(g.data(c)[0])
}
