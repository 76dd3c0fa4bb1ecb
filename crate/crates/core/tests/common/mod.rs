//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use gatemabsa::blocks::GraphMode;
use gatemabsa::encoder::ModelInputs;
use gatemabsa::feature_io::{adjacency_from_edges, FeatureRecord, Polarity, IMAGE_DIM, IMAGE_REGIONS, TEXT_DIM};
use gatemabsa::params::Params;
use gatemabsa::{GateMabsaModel, HeadConfig, ModelConfig, Tensor};
use rand::Rng;

pub fn rand_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Random spanning tree plus a few extra undirected edges.
pub fn random_adjacency<R: Rng>(rng: &mut R, n: usize) -> Tensor {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|t| (rng.gen_range(0..t), t)).collect();
    for _ in 0..n / 3 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        edges.push((a, b));
    }
    adjacency_from_edges(n, &edges)
}

/// Sorted distinct positions, possibly empty when `allow_implicit`.
pub fn random_positions<R: Rng>(rng: &mut R, n: usize, allow_implicit: bool) -> Vec<usize> {
    let count = if allow_implicit && rng.gen_bool(0.15) { 0 } else { rng.gen_range(1..=n.min(3)) };
    let mut pos: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let j = rng.gen_range(i..n);
        pos.swap(i, j);
    }
    pos.truncate(count);
    pos.sort_unstable();
    pos
}

fn f32_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f32) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale) as f64).collect()).unwrap()
}

/// Valid record with `f32`-representable features.
pub fn random_record<R: Rng>(rng: &mut R, n: usize) -> FeatureRecord {
    let a = rng.gen_range(1..=3);
    FeatureRecord {
        id: format!("r{}", rng.gen::<u32>()),
        n_tokens: n,
        token_feats: f32_tensor(rng, n, TEXT_DIM, 2.0),
        image_grid: f32_tensor(rng, IMAGE_REGIONS, IMAGE_DIM, 2.0),
        aspect_positions: if n == 0 { vec![] } else { random_positions(rng, n, true) },
        aspect_feats: f32_tensor(rng, a, TEXT_DIM, 2.0),
        adjacency: random_adjacency(rng, n),
        label: Polarity::from_index(rng.gen_range(0..3)).unwrap(),
    }
}

/// Block inputs at width `dm`: `n_valid` real rows followed by zero padding.
pub fn random_inputs<R: Rng>(rng: &mut R, n_valid: usize, n_max: usize, dm: usize) -> ModelInputs {
    let mut sentence = rand_tensor(rng, n_max, dm, 1.5);
    sentence.data_mut()[n_valid * dm..].fill(0.0);
    let aspect = rand_tensor(rng, 1, dm, 1.5);
    let image = rand_tensor(rng, 1, dm, 1.5);
    let rep = |row: &Tensor| Tensor::from_vec(n_max, dm, row.data().repeat(n_max)).unwrap();
    let adj_valid = random_adjacency(rng, n_valid);
    let mut adjacency = Tensor::zeros(n_max, n_max);
    for i in 0..n_valid {
        for j in 0..n_valid {
            adjacency.set(i, j, adj_valid.get(i, j));
        }
    }
    let mut aspect_mask = vec![false; n_max];
    for p in random_positions(rng, n_valid, true) {
        aspect_mask[p] = true;
    }
    ModelInputs {
        sentence,
        aspect_bcast: rep(&aspect),
        image_bcast: rep(&image),
        pad_mask: (0..n_max).map(|t| t < n_valid).collect(),
        aspect_mask,
        adjacency,
        aspect_truncated: false,
    }
}

/// Shifts every small parameter leaf by uniform noise so scalars, biases
/// and DyT settings are away from their initial values. The wide encoder
/// projections keep their fan-in scale.
pub fn perturb<P: Params<Tensor>, R: Rng>(params: &mut P, rng: &mut R, amount: f64) {
    params.visit_mut("", &mut |_, t| {
        if t.rows() < 100 {
            for v in t.data_mut() {
                *v += rng.gen_range(-amount..amount);
            }
        }
    });
}

pub fn tiny_config(model_dim: usize, n_heads: usize, mode: GraphMode) -> ModelConfig {
    ModelConfig { head: HeadConfig::new(model_dim, n_heads).unwrap(), graph_mode: mode, ..ModelConfig::default() }
}

pub fn random_model<R: Rng>(rng: &mut R, model_dim: usize, n_heads: usize, mode: GraphMode) -> GateMabsaModel {
    let mut m = GateMabsaModel::new(tiny_config(model_dim, n_heads, mode), rng.gen()).unwrap();
    perturb(&mut m.params, rng, 0.5);
    m
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
