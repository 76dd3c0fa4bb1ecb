//! Slow reference forward pass used to check the main implementation.
//!
//! Everything here is written as explicit per-element loops over
//! `Vec<Vec<f64>>`, with no calls into [`crate::numerics`] kernels. The
//! cumulative forget matrix is summed term by term (O(n³)) instead of from
//! prefix sums, and the image stream projects every region before pooling.

#![allow(clippy::needless_range_loop)]

use crate::blocks::{FuseParams, GraphMode, SemParams, SynParams};
use crate::encoder::ModelInputs;
use crate::error::{Error, Result};
use crate::feature_io::{FeatureRecord, IMAGE_DIM, IMAGE_REGIONS, NUM_CLASSES, TEXT_DIM};
use crate::mlstm::{HeadConfig, QkvParams};
use crate::model::GateMabsaModel;
use crate::numerics::Tensor;
use crate::params::Dyt;

type Mat = Vec<Vec<f64>>;

const NORM_FLOOR: f64 = 1e-8;

fn rows(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c.max(1)).map(<[f64]>::to_vec).collect()
}

fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c]
}

fn to_tensor(m: &Mat, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(m.len() * cols);
    for row in m {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![m.len(), cols], data).expect("rows have equal width")
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt().max(NORM_FLOOR) * nb.sqrt().max(NORM_FLOOR))
}

/// `x · w[:, cols] + b[cols]` for one row.
fn affine_cols(x: &[f64], w: &Tensor, b: &Tensor, cols: std::ops::Range<usize>) -> Vec<f64> {
    cols.map(|c| {
        let mut s = 0.0;
        for (i, xi) in x.iter().enumerate() {
            s += xi * at(w, i, c);
        }
        s + b.data()[c]
    })
    .collect()
}

/// Scalar gate of `head` from a `3·head_dim` input.
fn scalar_gate(x: &[f64], w: &Tensor, b: &Tensor, head: usize) -> f64 {
    let mut s = b.data()[head];
    for (r, xr) in x.iter().enumerate() {
        s += at(w, r, head) * xr;
    }
    s
}

fn tripled(u: &[f64]) -> Vec<f64> {
    let mut out = u.to_vec();
    out.extend_from_slice(u);
    out.extend_from_slice(u);
    out
}

fn scalar(t: &Tensor) -> f64 {
    t.data()[0]
}

struct HeadStreams {
    q: Mat,
    k: Mat,
    v: Mat,
    input: Vec<f64>,
    forget: Vec<f64>,
}

fn head_streams(q_src: &Mat, k_src: &Mat, v_src: &Mat, p: &QkvParams, cfg: &HeadConfig, head: usize) -> HeadStreams {
    let hd = cfg.head_dim();
    let cols = head * hd..(head + 1) * hd;
    let scale = (hd as f64).sqrt();
    let n = q_src.len();
    let mut s = HeadStreams {
        q: Vec::with_capacity(n),
        k: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        input: Vec::with_capacity(n),
        forget: Vec::with_capacity(n),
    };
    for t in 0..n {
        let q = affine_cols(&q_src[t], &p.w_q, &p.b_q, cols.clone());
        let k: Vec<f64> = cols
            .clone()
            .map(|c| {
                let mut acc = 0.0;
                for (i, xi) in k_src[t].iter().enumerate() {
                    acc += xi * at(&p.w_k, i, c);
                }
                acc / scale + p.b_k.data()[c]
            })
            .collect();
        let v = affine_cols(&v_src[t], &p.w_v, &p.b_v, cols.clone());
        let mut qkv = q.clone();
        qkv.extend_from_slice(&k);
        qkv.extend_from_slice(&v);
        s.input.push(scalar_gate(&qkv, &p.w_i, &p.b_i, head));
        s.forget.push(scalar_gate(&qkv, &p.w_f, &p.b_f, head));
        s.q.push(q);
        s.k.push(k);
        s.v.push(v);
    }
    s
}

/// Decay pipeline of one head with the block's extra gate columns.
fn naive_head(s: &HeadStreams, extras: &[Vec<f64>], pad: &[bool], cfg: &HeadConfig) -> Mat {
    let n = pad.len();
    let hd = cfg.head_dim();
    let mut h = vec![vec![0.0; hd]; n];
    for i in 0..n {
        if !pad[i] {
            continue;
        }
        let mut log_d = vec![f64::NEG_INFINITY; n];
        for j in 0..=i {
            if !pad[j] {
                continue;
            }
            let mut log_f = 0.0;
            for k in j..=i {
                log_f += log_sigmoid(s.forget[k]);
            }
            let mut gate = s.input[j];
            for e in extras {
                gate += e[j];
            }
            log_d[j] = log_f + gate;
        }
        let m = log_d.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut c = vec![0.0; n];
        for j in 0..n {
            if log_d[j].is_finite() {
                let mut dot = 0.0;
                for d in 0..hd {
                    dot += s.q[i][d] * s.k[j][d];
                }
                c[j] = dot / (hd as f64).sqrt() * (log_d[j] - m).exp();
            }
        }
        let den: f64 = c.iter().sum::<f64>() + cfg.eps;
        for j in 0..n {
            let w = c[j] / den;
            for d in 0..hd {
                h[i][d] += w * s.v[j][d];
            }
        }
    }
    h
}

fn naive_dyt(x: &Mat, p: &Dyt) -> Mat {
    let alpha = scalar(&p.alpha);
    x.iter()
        .map(|row| {
            row.iter().enumerate().map(|(c, v)| p.gamma.data()[c] * (alpha * v).tanh() + p.beta.data()[c]).collect()
        })
        .collect()
}

fn merge(heads: Vec<Mat>, n: usize) -> Mat {
    (0..n).map(|t| heads.iter().flat_map(|h| h[t].iter().copied()).collect()).collect()
}

fn pool_positions(aspect: &[bool], pad: &[bool]) -> Vec<usize> {
    let explicit: Vec<usize> = (0..aspect.len()).filter(|&t| aspect[t]).collect();
    if explicit.is_empty() {
        (0..pad.len()).filter(|&t| pad[t]).collect()
    } else {
        explicit
    }
}

fn mean_over(rows: &Mat, positions: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for &t in positions {
        for d in 0..width {
            out[d] += rows[t][d];
        }
    }
    for v in &mut out {
        *v /= positions.len() as f64;
    }
    out
}

pub fn naive_fuse(inputs: &ModelInputs, p: &FuseParams, cfg: &HeadConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = inputs.pad_mask.len();
    let hd = cfg.head_dim();
    let sentence = rows(&inputs.sentence);
    let image = rows(&inputs.image_bcast);
    let aspect = rows(&inputs.aspect_bcast);
    let lambda = scalar(&p.lambda);
    let mut heads = Vec::new();
    for head in 0..cfg.n_heads {
        let s = head_streams(&sentence, &image, &sentence, &p.qkv, cfg, head);
        let h_a = aspect[0][head * hd..(head + 1) * hd].to_vec();
        let h_i = image[0][head * hd..(head + 1) * hd].to_vec();
        let a_const = scalar_gate(&tripled(&h_a), &p.w_a, &p.b_a, head);
        let im_const = scalar_gate(&tripled(&h_i), &p.w_im, &p.b_im, head);
        let a: Vec<f64> = (0..n).map(|t| a_const + lambda * cosine(&s.q[t], &h_a)).collect();
        let im: Vec<f64> = (0..n).map(|t| im_const + lambda * cosine(&s.q[t], &h_i)).collect();
        heads.push(naive_head(&s, &[a, im], &inputs.pad_mask, cfg));
    }
    Ok(to_tensor(&naive_dyt(&merge(heads, n), &p.dyt), cfg.model_dim))
}

pub fn naive_syn(
    h_fuse: &Tensor,
    adjacency: &Tensor,
    aspect_mask: &[bool],
    pad_mask: &[bool],
    p: &SynParams,
    cfg: &HeadConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n = pad_mask.len();
    let hd = cfg.head_dim();
    let x = rows(h_fuse);
    let gamma = scalar(&p.gamma);
    let adj = |i: usize, j: usize| {
        if pad_mask[i] && pad_mask[j] {
            at(adjacency, i, j)
        } else {
            0.0
        }
    };
    let pool = pool_positions(aspect_mask, pad_mask);
    let mut heads = Vec::new();
    for head in 0..cfg.n_heads {
        let s = head_streams(&x, &x, &x, &p.qkv, cfg, head);
        let diag: Vec<f64> = (0..n)
            .map(|t| match p.graph_mode {
                GraphMode::LiteralDiag => adj(t, t),
                GraphMode::RowAggregate => {
                    let (mut num, mut deg) = (0.0, 0.0);
                    for j in 0..n {
                        num += adj(t, j) * cosine(&s.q[t], &s.q[j]);
                        deg += adj(t, j);
                    }
                    if deg > 0.0 {
                        num / deg
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        let smoothed: Mat = (0..n)
            .map(|t| {
                let deg: f64 = (0..n).map(|j| adj(t, j)).sum();
                (0..hd)
                    .map(|d| if deg == 0.0 { 0.0 } else { (0..n).map(|j| adj(t, j) * s.q[j][d]).sum::<f64>() / deg })
                    .collect()
            })
            .collect();
        let a_syn = mean_over(&smoothed, &pool, hd);
        let g_const = scalar_gate(&tripled(&a_syn), &p.w_g, &p.b_g, head);
        let g: Vec<f64> = diag.iter().map(|d| g_const + gamma * d).collect();
        heads.push(naive_head(&s, &[g], pad_mask, cfg));
    }
    Ok(to_tensor(&naive_dyt(&merge(heads, n), &p.dyt), cfg.model_dim))
}

pub fn naive_sem(
    h_syn: &Tensor,
    aspect_mask: &[bool],
    pad_mask: &[bool],
    p: &SemParams,
    cfg: &HeadConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n = pad_mask.len();
    let hd = cfg.head_dim();
    let x = rows(h_syn);
    let (lambda, alpha) = (scalar(&p.lambda), scalar(&p.alpha));
    let pool = pool_positions(aspect_mask, pad_mask);
    let n_valid = pad_mask.iter().filter(|&&m| m).count();
    let aspect_at: Vec<usize> = (0..n).filter(|&t| aspect_mask[t]).collect();
    let distance = |t: usize| -> f64 {
        let mut best: Option<usize> = None;
        for &p in &aspect_at {
            let d = t.abs_diff(p);
            best = Some(best.map_or(d, |b: usize| b.min(d)));
        }
        best.map_or(0.0, |d| d as f64 / n_valid as f64)
    };
    let mut heads = Vec::new();
    for head in 0..cfg.n_heads {
        let s = head_streams(&x, &x, &x, &p.qkv, cfg, head);
        let a_sem = mean_over(&s.q, &pool, hd);
        let s_const = scalar_gate(&tripled(&a_sem), &p.w_s, &p.b_s, head);
        let gate: Vec<f64> = (0..n)
            .map(|t| {
                let d = if pad_mask[t] { distance(t) } else { 0.0 };
                s_const + lambda * cosine(&s.q[t], &a_sem) - alpha * d
            })
            .collect();
        heads.push(naive_head(&s, &[gate], pad_mask, cfg));
    }
    Ok(to_tensor(&naive_dyt(&merge(heads, n), &p.dyt), cfg.model_dim))
}

/// Block inputs built literally: tokens and every image region are
/// projected first, then the aspect rows and image regions are averaged.
pub fn naive_inputs(record: &FeatureRecord, model: &GateMabsaModel, n_max: usize) -> Result<ModelInputs> {
    if record.aspect_tokens() == 0 {
        return Err(Error::EmptyPool);
    }
    let p = &model.params;
    let dm = model.config.head.model_dim;
    let n_valid = record.n_tokens.min(n_max);
    let project_text = |row: &[f64]| -> Vec<f64> {
        match &p.text_proj {
            Some(w) => (0..dm).map(|c| (0..TEXT_DIM).map(|i| row[i] * at(w, i, c)).sum()).collect(),
            None => row.to_vec(),
        }
    };
    let mut sentence = vec![vec![0.0; dm]; n_max];
    for (t, row) in sentence.iter_mut().enumerate().take(n_valid) {
        let raw: Vec<f64> = (0..TEXT_DIM).map(|i| at(&record.token_feats, t, i)).collect();
        *row = if p.text_proj.is_some() { project_text(&raw) } else { raw };
    }
    // Projecting a zero row gives zero, so padded rows stay zero either way.

    let a_rows = record.aspect_tokens();
    let mut aspect_raw = vec![0.0; TEXT_DIM];
    for r in 0..a_rows {
        for i in 0..TEXT_DIM {
            aspect_raw[i] += at(&record.aspect_feats, r, i) / a_rows as f64;
        }
    }
    let aspect = project_text(&aspect_raw);

    let mut image = vec![0.0; dm];
    for region in 0..IMAGE_REGIONS {
        let raw: Vec<f64> = (0..IMAGE_DIM).map(|i| at(&record.image_grid, region, i)).collect();
        let projected = affine_cols(&raw, &p.image_proj.w, &p.image_proj.b, 0..dm);
        for c in 0..dm {
            image[c] += projected[c] / IMAGE_REGIONS as f64;
        }
    }

    let mut adjacency = Tensor::zeros(n_max, n_max);
    for i in 0..n_valid {
        for j in 0..n_valid {
            adjacency.set(i, j, at(&record.adjacency, i, j));
        }
    }
    let mut aspect_mask = vec![false; n_max];
    for &pos in &record.aspect_positions {
        if pos < n_valid {
            aspect_mask[pos] = true;
        }
    }
    let aspect_truncated = !record.aspect_positions.is_empty() && !aspect_mask.contains(&true);
    Ok(ModelInputs {
        sentence: to_tensor(&sentence, dm),
        aspect_bcast: to_tensor(&vec![aspect; n_max], dm),
        image_bcast: to_tensor(&vec![image; n_max], dm),
        pad_mask: (0..n_max).map(|t| t < n_valid).collect(),
        aspect_mask,
        adjacency,
        aspect_truncated,
    })
}

/// Eval-mode logits of the whole network. `pad_to` mirrors the main
/// forward's option and defaults to the record length capped at
/// `max_seq_len`.
pub fn naive_model(
    record: &FeatureRecord,
    model: &GateMabsaModel,
    pad_to: Option<usize>,
) -> Result<[f64; NUM_CLASSES]> {
    if record.n_tokens == 0 {
        return Err(Error::InvalidArgument("record has no tokens".into()));
    }
    let cfg = &model.config.head;
    let n_max = pad_to.unwrap_or(record.n_tokens.min(model.config.max_seq_len));
    let inputs = naive_inputs(record, model, n_max)?;
    let p = &model.params;
    let h = naive_fuse(&inputs, &p.fuse, cfg)?;
    let h = naive_syn(&h, &inputs.adjacency, &inputs.aspect_mask, &inputs.pad_mask, &p.syn, cfg)?;
    let h = naive_sem(&h, &inputs.aspect_mask, &inputs.pad_mask, &p.sem, cfg)?;
    let h = rows(&h);
    let valid: Vec<usize> = (0..n_max).filter(|&t| inputs.pad_mask[t]).collect();
    let pooled = mean_over(&h, &valid, cfg.model_dim);
    let logits = affine_cols(&pooled, &p.classifier.w, &p.classifier.b, 0..NUM_CLASSES);
    Ok([logits[0], logits[1], logits[2]])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::{uniform, Params};

    #[test]
    fn zero_everything_gives_zero() {
        let cfg = HeadConfig::new(4, 2).unwrap();
        let mut p = FuseParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        p.visit_mut("", &mut |_, t| t.fill(0.0));
        let inputs = ModelInputs {
            sentence: Tensor::zeros(1, 4),
            aspect_bcast: Tensor::zeros(1, 4),
            image_bcast: Tensor::zeros(1, 4),
            pad_mask: vec![true],
            aspect_mask: vec![true],
            adjacency: Tensor::identity(1),
            aspect_truncated: false,
        };
        let out = naive_fuse(&inputs, &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_combination_returns_values() {
        let cfg = HeadConfig::new(2, 1).unwrap();
        let hd = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 3;
        let q: Mat = vec![vec![1.0, 0.5]; n];
        let k: Mat = vec![vec![2.0, 1.0]; n];
        let v = rows(&uniform(n, hd, 1.0, &mut rng));
        let s = HeadStreams { q, k, v: v.clone(), input: vec![0.0; n], forget: vec![0.0; n] };
        // Later columns get a huge gate boost, so row i weights only column i.
        let boost: Vec<f64> = (0..n).map(|j| 1e4 * j as f64).collect();
        let h = naive_head(&s, &[boost], &vec![true; n], &cfg);
        for i in 0..n {
            for d in 0..hd {
                assert!((h[i][d] - v[i][d] / (1.0 + cfg.eps / (2.5 / 2f64.sqrt()))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_sigmoid_is_accurate_in_both_tails() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
