//! Deterministic synthetic dataset with a controllable label signal.
//!
//! Every example has an aspect token placed in a random chain-like
//! dependency tree. Tokens adjacent to the aspect carry
//! `separation · prototype[label]` on top of unit Gaussian noise. Half of the
//! examples also carry `separation · image_prototype[label]` on every image
//! region; the other half get pure-noise images. With `separation = 0` the
//! features are independent of the label.
//!
//! Prototypes are drawn from a fixed stream shared by all seeds, so datasets
//! generated with different seeds agree on what each class looks like.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    adjacency_from_edges, write_record_file, FeatureRecord, Manifest, ManifestEntry, Polarity, Split, IMAGE_DIM,
    IMAGE_REGIONS, NUM_CLASSES, TEXT_DIM,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const PROTOTYPE_SEED: u64 = 0x6d61_6273_615f_7031;

/// Probability that token `t` attaches to `t - 1` rather than a random
/// earlier token.
const CHAIN_PROB: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub examples: usize,
    pub tokens: usize,
    pub separation: f64,
}

struct Prototypes {
    text: Vec<Vec<f64>>,
    image: Vec<Vec<f64>>,
    aspect: Vec<f64>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl Prototypes {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
        let text = (0..NUM_CLASSES).map(|_| normals(&mut rng, TEXT_DIM)).collect();
        let image = (0..NUM_CLASSES).map(|_| normals(&mut rng, IMAGE_DIM)).collect();
        let aspect = normals(&mut rng, TEXT_DIM);
        Self { text, image, aspect }
    }
}

/// Values are rounded through `f32` so records survive the on-disk format
/// unchanged.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<FeatureRecord>> {
    if spec.tokens < 2 {
        return Err(Error::InvalidArgument(format!("synthetic records need at least 2 tokens, got {}", spec.tokens)));
    }
    if !spec.separation.is_finite() || spec.separation < 0.0 {
        return Err(Error::InvalidArgument(format!("separation must be finite and >= 0, got {}", spec.separation)));
    }
    let protos = Prototypes::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.tokens;
    let sep = spec.separation;

    let mut records = Vec::with_capacity(spec.examples);
    for idx in 0..spec.examples {
        let label = Polarity::from_index(idx % NUM_CLASSES).expect("index below class count");
        let class = label.index();

        let edges: Vec<(usize, usize)> = (1..n)
            .map(|t| {
                let parent = if rng.gen::<f64>() < CHAIN_PROB { t - 1 } else { rng.gen_range(0..t) };
                (parent, t)
            })
            .collect();
        let aspect = rng.gen_range(0..n);
        let neighbours: Vec<usize> = edges
            .iter()
            .filter_map(|&(a, b)| match (a == aspect, b == aspect) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect();

        let mut tokens = normals(&mut rng, n * TEXT_DIM);
        for (d, v) in tokens[aspect * TEXT_DIM..(aspect + 1) * TEXT_DIM].iter_mut().enumerate() {
            *v += protos.aspect[d];
        }
        for &t in &neighbours {
            for (d, v) in tokens[t * TEXT_DIM..(t + 1) * TEXT_DIM].iter_mut().enumerate() {
                *v += sep * protos.text[class][d];
            }
        }

        let a_rows = rng.gen_range(1..=2);
        let mut aspect_feats = normals(&mut rng, a_rows * TEXT_DIM);
        for (i, v) in aspect_feats.iter_mut().enumerate() {
            *v = protos.aspect[i % TEXT_DIM] + 0.1 * *v;
        }

        // Alternate correlated / uncorrelated images within each class.
        let correlated = (idx / NUM_CLASSES).is_multiple_of(2);
        let mut image = normals(&mut rng, IMAGE_REGIONS * IMAGE_DIM);
        if correlated {
            for (i, v) in image.iter_mut().enumerate() {
                *v += sep * protos.image[class][i % IMAGE_DIM];
            }
        }

        let round = |v: Vec<f64>| v.into_iter().map(f32_round).collect::<Vec<_>>();
        records.push(FeatureRecord {
            id: format!("synth-{}-{idx:05}", spec.seed),
            n_tokens: n,
            token_feats: Tensor::from_vec(n, TEXT_DIM, round(tokens))?,
            image_grid: Tensor::from_vec(IMAGE_REGIONS, IMAGE_DIM, round(image))?,
            aspect_positions: vec![aspect],
            aspect_feats: Tensor::from_vec(a_rows, TEXT_DIM, round(aspect_feats))?,
            adjacency: adjacency_from_edges(n, &edges),
            label,
        });
    }
    Ok(records)
}

/// Generates a dataset and writes it under `dir` as `NNNNN.gmab` files plus
/// `manifest.json`. The last `round(dev_fraction · examples)` records are
/// tagged `dev`, the rest `train`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec, dev_fraction: f64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&dev_fraction) {
        return Err(Error::InvalidArgument(format!("dev fraction {dev_fraction} outside [0, 1]")));
    }
    let records = gen_synthetic(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let n_dev = (dev_fraction * records.len() as f64).round() as usize;
    let n_train = records.len() - n_dev;
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let name = format!("{i:05}.gmab");
        write_record_file(r, &dir.join(&name))?;
        entries.push(ManifestEntry { path: name.into(), split: if i < n_train { Split::Train } else { Split::Dev } });
    }
    let manifest = Manifest::new(entries);
    manifest.save(&dir.join("manifest.json"))?;
    Manifest::load(&dir.join("manifest.json"))
}
