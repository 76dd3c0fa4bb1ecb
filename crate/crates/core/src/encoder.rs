//! Turns a [`FeatureRecord`] into the three length-`n` streams the blocks
//! consume: sentence tokens, the broadcast pooled aspect, and the broadcast
//! projected image.
//!
//! When the model width differs from the text encoder width, a bias-free
//! linear map (`text_proj`) brings token and aspect encodings to model width.
//! At full width no such map exists and the streams are the raw encodings.

use crate::error::{Error, Result};
use crate::feature_io::{FeatureRecord, IMAGE_DIM, TEXT_DIM};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{bind_frozen, Linear};

/// Linear map from pooled image features to model width.
pub type ImageProjParams<T = Tensor> = Linear<T>;

/// A record cut or zero-padded to a fixed length, still at encoder width.
#[derive(Clone, Debug)]
pub struct PaddedRecord {
    pub n_valid: usize,
    /// `n_max × TEXT_DIM`, zero rows past `n_valid`.
    pub sentence: Tensor,
    /// `1 × TEXT_DIM` mean of the aspect-term encodings.
    pub pooled_aspect: Tensor,
    /// `1 × IMAGE_DIM` mean over the image regions.
    pub pooled_image: Tensor,
    pub pad_mask: Vec<bool>,
    pub aspect_mask: Vec<bool>,
    /// `n_max × n_max`; padded rows and columns (including their diagonal) are 0.
    pub adjacency: Tensor,
    /// Set when truncation dropped every aspect position of a record that had
    /// some; the record then falls back to the implicit-aspect convention.
    pub aspect_truncated: bool,
}

impl PaddedRecord {
    pub fn n_max(&self) -> usize {
        self.pad_mask.len()
    }
}

fn mean_rows(t: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant_ref(t);
    let m = g.mean_rows(v)?;
    Ok(g.value(m))
}

/// Zero-pads or truncates `record` to `n_max` tokens.
pub fn pad_or_truncate(record: &FeatureRecord, n_max: usize) -> Result<PaddedRecord> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    if record.aspect_tokens() == 0 {
        return Err(Error::EmptyPool);
    }
    let n_valid = record.n_tokens.min(n_max);

    let mut sentence = Tensor::zeros(n_max, TEXT_DIM);
    sentence.data_mut()[..n_valid * TEXT_DIM].copy_from_slice(&record.token_feats.data()[..n_valid * TEXT_DIM]);

    let mut adjacency = Tensor::zeros(n_max, n_max);
    for i in 0..n_valid {
        for j in 0..n_valid {
            adjacency.set(i, j, record.adjacency.get(i, j));
        }
    }

    let pad_mask: Vec<bool> = (0..n_max).map(|t| t < n_valid).collect();
    let mut aspect_mask = vec![false; n_max];
    for &p in record.aspect_positions.iter().filter(|&&p| p < n_valid) {
        aspect_mask[p] = true;
    }
    let aspect_truncated = !record.aspect_positions.is_empty() && !aspect_mask.iter().any(|&m| m);

    Ok(PaddedRecord {
        n_valid,
        sentence,
        pooled_aspect: mean_rows(&record.aspect_feats)?,
        pooled_image: mean_rows(&record.image_grid)?,
        pad_mask,
        aspect_mask,
        adjacency,
        aspect_truncated,
    })
}

/// Block input streams as graph nodes: `sentence` is `n×model_dim`,
/// `aspect` and `image` are the pooled `1×model_dim` rows that the
/// broadcast streams repeat.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    pub sentence: Var,
    pub aspect: Var,
    pub image: Var,
}

/// Projects the padded record into model width inside `g`.
///
/// The image path pools before projecting; the affine map commutes with the
/// mean, so this equals projecting all 49 regions and pooling afterwards.
pub fn encode<'a>(
    g: &mut Graph<'a>,
    padded: &'a PaddedRecord,
    text_proj: Option<Var>,
    image_proj: &ImageProjParams<Var>,
) -> Result<Streams> {
    let mut sentence = g.constant_ref(&padded.sentence);
    let mut aspect = g.constant_ref(&padded.pooled_aspect);
    if let Some(w) = text_proj {
        sentence = g.matmul(sentence, w)?;
        aspect = g.matmul(aspect, w)?;
    }
    let pooled = g.constant_ref(&padded.pooled_image);
    let img = g.matmul(pooled, image_proj.w)?;
    let image = g.add(img, image_proj.b)?;
    Ok(Streams { sentence, aspect, image })
}

/// Row-mean of `aspect_feats` repeated `n_max` times.
pub fn pool_and_broadcast_aspect(aspect_feats: &Tensor, n_max: usize) -> Result<Tensor> {
    if aspect_feats.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyPool);
    }
    let mut g = Graph::new();
    let a = g.constant_ref(aspect_feats);
    let m = g.mean_rows(a)?;
    let out = g.repeat_rows(m, n_max)?;
    Ok(g.value(out))
}

/// Projected, pooled image vector repeated `n_max` times.
pub fn project_image(image_grid: &Tensor, params: &ImageProjParams, n_max: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind_frozen(&mut g, params);
    let grid = g.constant_ref(image_grid);
    let pooled = g.mean_rows(grid)?;
    let proj = g.matmul(pooled, p.w)?;
    let proj = g.add(proj, p.b)?;
    let out = g.repeat_rows(proj, n_max)?;
    Ok(g.value(out))
}

/// Block inputs at model width as plain tensors.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    /// `n_max × model_dim`
    pub sentence: Tensor,
    /// `n_max × model_dim`, identical rows.
    pub aspect_bcast: Tensor,
    /// `n_max × model_dim`, identical rows.
    pub image_bcast: Tensor,
    pub pad_mask: Vec<bool>,
    pub aspect_mask: Vec<bool>,
    pub adjacency: Tensor,
    pub aspect_truncated: bool,
}

impl ModelInputs {
    pub fn n_max(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn n_valid(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// The pooled aspect vector (one broadcast row).
    pub fn aspect_row(&self) -> Tensor {
        Tensor::row_vector(self.aspect_bcast.row(0).to_vec())
    }

    pub fn image_row(&self) -> Tensor {
        Tensor::row_vector(self.image_bcast.row(0).to_vec())
    }
}

/// Evaluates the encoder for `record` at length `n_max`.
pub fn build_inputs(
    record: &FeatureRecord,
    n_max: usize,
    text_proj: Option<&Tensor>,
    image_proj: &ImageProjParams,
) -> Result<ModelInputs> {
    let padded = pad_or_truncate(record, n_max)?;
    let mut g = Graph::new();
    let tp = text_proj.map(|t| g.constant_ref(t));
    let ip = bind_frozen(&mut g, image_proj);
    let s = encode(&mut g, &padded, tp, &ip)?;
    let aspect = g.repeat_rows(s.aspect, n_max)?;
    let image = g.repeat_rows(s.image, n_max)?;
    Ok(ModelInputs {
        sentence: g.value(s.sentence),
        aspect_bcast: g.value(aspect),
        image_bcast: g.value(image),
        pad_mask: padded.pad_mask.clone(),
        aspect_mask: padded.aspect_mask.clone(),
        adjacency: padded.adjacency.clone(),
        aspect_truncated: padded.aspect_truncated,
    })
}

/// Image projection at initialization: `uniform(±1/√2048)` weights, zero bias.
pub fn init_image_proj<R: rand::Rng + ?Sized>(model_dim: usize, rng: &mut R) -> ImageProjParams {
    Linear::init(IMAGE_DIM, model_dim, rng)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::feature_io::{adjacency_from_edges, Polarity, IMAGE_REGIONS};
    use crate::params::bind;

    fn record(n: usize, aspect: Vec<usize>) -> FeatureRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let edges: Vec<_> = (1..n).map(|t| (t - 1, t)).collect();
        FeatureRecord {
            id: "r".into(),
            n_tokens: n,
            token_feats: Tensor::from_vec(n, TEXT_DIM, (0..n * TEXT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
            image_grid: Tensor::filled(IMAGE_REGIONS, IMAGE_DIM, 0.5),
            aspect_positions: aspect,
            aspect_feats: Tensor::filled(1, TEXT_DIM, 1.0),
            adjacency: adjacency_from_edges(n, &edges),
            label: Polarity::Negative,
        }
    }

    #[test]
    fn aspect_broadcast_examples() {
        let v = Tensor::row_vector((0..TEXT_DIM).map(|i| i as f64).collect());
        let out = pool_and_broadcast_aspect(&v, 3).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.data());
        }
        let two = Tensor::from_rows(&[vec![0.0; 4], vec![2.0; 4]]).unwrap();
        let out = pool_and_broadcast_aspect(&two, 2).unwrap();
        assert!(out.data().iter().all(|&x| x == 1.0));
        let c = Tensor::filled(3, 4, -0.75);
        assert!(pool_and_broadcast_aspect(&c, 5).unwrap().data().iter().all(|&x| x == -0.75));
        assert!(matches!(pool_and_broadcast_aspect(&Tensor::zeros(0, 4), 2), Err(Error::EmptyPool)));
    }

    #[test]
    fn project_image_examples() {
        let zero = project_image(
            &Tensor::zeros(IMAGE_REGIONS, IMAGE_DIM),
            &Linear::init(IMAGE_DIM, 8, &mut ChaCha8Rng::seed_from_u64(1)),
            3,
        )
        .unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));

        // Identity-like block on the first 4 channels, constant grid.
        let mut p = Linear::zeros(IMAGE_DIM, 4);
        for i in 0..4 {
            p.w.set(i, i, 1.0);
        }
        let out = project_image(&Tensor::filled(IMAGE_REGIONS, IMAGE_DIM, 2.5), &p, 2).unwrap();
        assert!(out.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn project_image_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = Tensor::from_vec(
            IMAGE_REGIONS,
            IMAGE_DIM,
            (0..IMAGE_REGIONS * IMAGE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let params = Linear::init(IMAGE_DIM, 3, &mut rng);
        let probe: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &ImageProjParams| -> f64 {
            let out = project_image(&grid, p, 2).unwrap();
            out.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let pv = bind(&mut g, &params);
        let gv = g.constant_ref(&grid);
        let pooled = g.mean_rows(gv).unwrap();
        let proj = g.matmul(pooled, pv.w).unwrap();
        let proj = g.add(proj, pv.b).unwrap();
        let rep = g.repeat_rows(proj, 2).unwrap();
        let pr = g.constant(Tensor::from_vec(2, 3, probe.clone()).unwrap());
        let m = g.mul(rep, pr).unwrap();
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(pv.w).unwrap();
        let h = 1e-5;
        for idx in (0..IMAGE_DIM * 3).step_by(97) {
            let mut plus = params.clone();
            plus.w.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.w.data_mut()[idx] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let analytic = gw.data()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "w[{idx}]: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn pads_short_records() {
        let p = pad_or_truncate(&record(2, vec![1]), 4).unwrap();
        assert_eq!(p.pad_mask, vec![true, true, false, false]);
        assert_eq!(p.aspect_mask, vec![false, true, false, false]);
        assert!(p.sentence.row(2).iter().all(|&x| x == 0.0));
        assert_eq!(p.adjacency.get(2, 2), 0.0);
        assert_eq!(p.adjacency.get(1, 1), 1.0);
        assert!(!p.aspect_truncated);
    }

    #[test]
    fn truncates_long_records() {
        let r = record(5, vec![2]);
        let p = pad_or_truncate(&r, 4).unwrap();
        assert_eq!(p.pad_mask, vec![true; 4]);
        assert_eq!(p.sentence.data(), &r.token_feats.data()[..4 * TEXT_DIM]);
        assert_eq!(p.n_valid, 4);
    }

    #[test]
    fn truncated_aspect_falls_back_with_flag() {
        let p = pad_or_truncate(&record(6, vec![5]), 4).unwrap();
        assert!(p.aspect_mask.iter().all(|&m| !m));
        assert!(p.aspect_truncated);
        let implicit = pad_or_truncate(&record(3, vec![]), 4).unwrap();
        assert!(!implicit.aspect_truncated);
    }

    #[test]
    fn broadcast_rows_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = record(3, vec![0]);
        let tp = crate::params::uniform(TEXT_DIM, 8, 0.05, &mut rng);
        let inputs = build_inputs(&r, 5, Some(&tp), &init_image_proj(8, &mut rng)).unwrap();
        for t in [&inputs.aspect_bcast, &inputs.image_bcast] {
            for i in 1..t.rows() {
                assert_eq!(t.row(i), t.row(0));
            }
        }
        assert_eq!(inputs.n_valid(), 3);
        assert_eq!(inputs.sentence.shape(), &[5, 8]);
    }
}
