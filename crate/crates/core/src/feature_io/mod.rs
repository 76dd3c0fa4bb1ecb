//! Precomputed multimodal feature records.
//!
//! A [`FeatureRecord`] stands in for the live text and image encoders: it
//! carries per-token sentence encodings, the aspect-term encodings, the raw
//! 7×7 image feature grid, a dependency adjacency matrix and the label.

mod gmab;
mod manifest;
mod synth;

use serde::{Deserialize, Serialize};

pub use gmab::{read_record, read_record_file, write_record, write_record_file, GMAB_MAGIC, GMAB_VERSION};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{gen_synthetic, write_synthetic, SynthSpec};

use crate::numerics::Tensor;

/// Width of per-token text encodings.
pub const TEXT_DIM: usize = 768;
/// Number of image regions in the flattened 7×7 grid.
pub const IMAGE_REGIONS: usize = 49;
/// Channel count of each image region.
pub const IMAGE_DIM: usize = 2048;
pub const NUM_CLASSES: usize = 3;

/// Sentiment polarity. The discriminants are the class indices used by the
/// file format, the classifier and the metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// One (sentence, image, aspect, label) example as dense features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// Valid (unpadded) token count.
    pub n_tokens: usize,
    /// `n_tokens × TEXT_DIM`
    pub token_feats: Tensor,
    /// `IMAGE_REGIONS × IMAGE_DIM`
    pub image_grid: Tensor,
    /// Sorted token indices of the aspect span; empty for implicit aspects.
    pub aspect_positions: Vec<usize>,
    /// `a × TEXT_DIM`, `a ≥ 1`
    pub aspect_feats: Tensor,
    /// `n_tokens × n_tokens`, symmetric 0/1 with unit diagonal.
    pub adjacency: Tensor,
    pub label: Polarity,
}

impl FeatureRecord {
    pub fn aspect_tokens(&self) -> usize {
        self.aspect_feats.shape().first().copied().unwrap_or(0)
    }
}

/// Checks every structural invariant of `r`; the record is valid iff the
/// returned list is empty.
pub fn validate_record(r: &FeatureRecord) -> Vec<String> {
    let mut v = Vec::new();
    let n = r.n_tokens;

    let expect_shape = |v: &mut Vec<String>, name: &str, t: &Tensor, want: &[usize]| -> bool {
        if t.shape() != want {
            v.push(format!("{name} has shape {:?}, expected {want:?}", t.shape()));
            false
        } else {
            true
        }
    };
    let finite = |v: &mut Vec<String>, name: &str, t: &Tensor| {
        if let Some(bad) = t.data().iter().position(|x| !x.is_finite() || x.abs() > f32::MAX as f64) {
            v.push(format!("{name} has a non-finite value at index {bad}"));
        }
    };

    if u32::try_from(n).is_err() {
        v.push(format!("n_tokens {n} does not fit the format"));
    }
    if expect_shape(&mut v, "token_feats", &r.token_feats, &[n, TEXT_DIM]) {
        finite(&mut v, "token_feats", &r.token_feats);
    }
    if expect_shape(&mut v, "image_grid", &r.image_grid, &[IMAGE_REGIONS, IMAGE_DIM]) {
        finite(&mut v, "image_grid", &r.image_grid);
    }
    let a = r.aspect_tokens();
    if a == 0 {
        v.push("aspect_feats must have at least one row".into());
    } else if expect_shape(&mut v, "aspect_feats", &r.aspect_feats, &[a, TEXT_DIM]) {
        finite(&mut v, "aspect_feats", &r.aspect_feats);
    }

    if let Some(&p) = r.aspect_positions.iter().find(|&&p| p >= n) {
        v.push(format!("aspect position {p} >= n_tokens {n}"));
    }
    if r.aspect_positions.windows(2).any(|w| w[0] >= w[1]) {
        v.push("aspect positions are not strictly increasing".into());
    }

    if expect_shape(&mut v, "adjacency", &r.adjacency, &[n, n]) {
        let adj = &r.adjacency;
        if adj.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            v.push("adjacency entries must be 0 or 1".into());
        }
        if (0..n).any(|i| (0..i).any(|j| adj.get(i, j) != adj.get(j, i))) {
            v.push("adjacency not symmetric".into());
        }
        if let Some(i) = (0..n).find(|&i| adj.get(i, i) != 1.0) {
            v.push(format!("adjacency diagonal entry {i} is not 1"));
        }
    }
    v
}

/// Builds a symmetric adjacency matrix with self-loops from undirected edges.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut adj = Tensor::identity(n);
    for &(a, b) in edges {
        adj.set(a, b, 1.0);
        adj.set(b, a, 1.0);
    }
    adj
}
