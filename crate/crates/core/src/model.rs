//! End-to-end network: encoder streams, the Fuse, Syn and Sem blocks, mean
//! pooling over valid tokens and a linear classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{fuse_block, sem_block, syn_block, FuseParams, GraphMode, SemParams, SynParams};
use crate::encoder::{encode, init_image_proj, pad_or_truncate, ImageProjParams, PaddedRecord};
use crate::error::{Error, Result};
use crate::feature_io::{FeatureRecord, Polarity, NUM_CLASSES, TEXT_DIM};
use crate::mlstm::{DecayMatrices, HeadConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{bind, bind_frozen, gradients_of, join, uniform, Linear, Params};

/// Everything needed to build a model besides its weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadConfig,
    pub graph_mode: GraphMode,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { head: HeadConfig::default(), graph_mode: GraphMode::default(), dropout: 0.5, max_seq_len: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    /// Whether token encodings need a projection to model width.
    pub fn has_text_proj(&self) -> bool {
        self.head.model_dim != TEXT_DIM
    }
}

/// All trainable weights, in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `TEXT_DIM × model_dim`, bias-free; absent at full width.
    pub text_proj: Option<T>,
    pub image_proj: ImageProjParams<T>,
    pub fuse: FuseParams<T>,
    pub syn: SynParams<T>,
    pub sem: SemParams<T>,
    /// `model_dim × 3`
    pub classifier: Linear<T>,
}

impl<T> Params<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> ModelParams<U> {
        ModelParams {
            text_proj: self.text_proj.as_ref().map(|t| f(&join(prefix, "text_proj"), t)),
            image_proj: self.image_proj.map(&join(prefix, "image_proj"), f),
            fuse: self.fuse.map(&join(prefix, "fuse"), f),
            syn: self.syn.map(&join(prefix, "syn"), f),
            sem: self.sem.map(&join(prefix, "sem"), f),
            classifier: self.classifier.map(&join(prefix, "classifier"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(t) = self.text_proj.as_mut() {
            f(&join(prefix, "text_proj"), t);
        }
        self.image_proj.visit_mut(&join(prefix, "image_proj"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.syn.visit_mut(&join(prefix, "syn"), f);
        self.sem.visit_mut(&join(prefix, "sem"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let head = &cfg.head;
        let dm = head.model_dim;
        Self {
            text_proj: cfg.has_text_proj().then(|| uniform(TEXT_DIM, dm, 1.0 / (TEXT_DIM as f64).sqrt(), rng)),
            image_proj: init_image_proj(dm, rng),
            fuse: FuseParams::init(head, rng),
            syn: SynParams::init(head, cfg.graph_mode, rng),
            sem: SemParams::init(head, rng),
            classifier: Linear::init(dm, NUM_CLASSES, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Seeds the dropout masks; ignored in eval mode.
    pub seed: u64,
    /// Sequence length to pad or cut to. Defaults to the record length
    /// capped at `max_seq_len`.
    pub pad_to: Option<usize>,
    /// Record per-head decay matrices of every block.
    pub trace: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, seed: 0, pad_to: None, trace: false }
    }

    pub fn train(seed: u64) -> Self {
        Self { mode: Mode::Train, seed, ..Self::eval() }
    }
}

/// Decay intermediates of one forward pass, one entry per head.
#[derive(Clone, Debug, Default)]
pub struct BlockTraces {
    pub fuse: Vec<DecayMatrices>,
    pub syn: Vec<DecayMatrices>,
    pub sem: Vec<DecayMatrices>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1 × 3`
    pub logits: Tensor,
    /// Valid rows whose normalization denominator was below `1e-4` in
    /// magnitude, summed over blocks and heads.
    pub near_zero_denominators: usize,
    pub traces: Option<BlockTraces>,
    /// Truncation removed every aspect position.
    pub aspect_truncated: bool,
}

/// Loss, parameter gradients and diagnostics for one record.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: ModelParams<Tensor>,
    pub near_zero_denominators: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub class: Polarity,
    pub probabilities: [f64; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMabsaModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl GateMabsaModel {
    /// Fresh model with weights drawn from `ChaCha8Rng::seed_from_u64(seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { config, params: ModelParams::init(&config, &mut rng) })
    }

    fn pad(&self, record: &FeatureRecord, opts: &ForwardOptions) -> Result<PaddedRecord> {
        if record.n_tokens == 0 {
            return Err(Error::InvalidArgument(format!("record {:?} has no tokens", record.id)));
        }
        let n_max = match opts.pad_to {
            Some(m) if m > self.config.max_seq_len => {
                return Err(Error::InvalidArgument(format!(
                    "pad length {m} exceeds max_seq_len {}",
                    self.config.max_seq_len
                )))
            }
            Some(m) => m,
            None => record.n_tokens.min(self.config.max_seq_len),
        };
        pad_or_truncate(record, n_max)
    }

    /// Builds the network inside `g` and returns the `1×3` logits node.
    fn build<'a>(
        &self,
        g: &mut Graph<'a>,
        p: &ModelParams<Var>,
        padded: &'a PaddedRecord,
        opts: &ForwardOptions,
        traces: Option<&mut BlockTraces>,
    ) -> Result<Var> {
        let cfg = &self.config.head;
        let train = opts.mode == Mode::Train;
        let rate = self.config.dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let (ft, st, mt) = match traces {
            Some(t) => (Some(&mut t.fuse), Some(&mut t.syn), Some(&mut t.sem)),
            None => (None, None, None),
        };

        let s = encode(g, padded, p.text_proj, &p.image_proj)?;
        let h = fuse_block(g, s.sentence, s.aspect, s.image, &padded.pad_mask, &p.fuse, cfg, ft)?;
        let h = g.dropout(h, rate, train, &mut rng)?;
        let h = syn_block(g, h, &padded.adjacency, &padded.aspect_mask, &padded.pad_mask, &p.syn, cfg, st)?;
        let h = g.dropout(h, rate, train, &mut rng)?;
        let h = sem_block(g, h, &padded.aspect_mask, &padded.pad_mask, &p.sem, cfg, mt)?;
        let h = g.dropout(h, rate, train, &mut rng)?;
        let pooled = g.masked_mean_rows(h, &padded.pad_mask)?;
        let pooled = g.dropout(pooled, rate, train, &mut rng)?;
        let z = g.matmul(pooled, p.classifier.w)?;
        g.add(z, p.classifier.b)
    }

    pub fn forward(&self, record: &FeatureRecord, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let padded = self.pad(record, opts)?;
        let mut g = Graph::new();
        let p = bind_frozen(&mut g, &self.params);
        let mut traces = opts.trace.then(BlockTraces::default);
        let logits = self.build(&mut g, &p, &padded, opts, traces.as_mut())?;
        Ok(ForwardOutput {
            logits: g.value(logits),
            near_zero_denominators: g.near_zero_denominators(),
            traces,
            aspect_truncated: padded.aspect_truncated,
        })
    }

    /// Cross-entropy loss of one record and its gradient with respect to
    /// every parameter.
    pub fn loss_and_grads(&self, record: &FeatureRecord, opts: &ForwardOptions) -> Result<LossAndGrads> {
        let padded = self.pad(record, opts)?;
        let mut g = Graph::new();
        let p = bind(&mut g, &self.params);
        let logits = self.build(&mut g, &p, &padded, opts, None)?;
        let loss = g.softmax_cross_entropy(logits, record.label.index())?;
        let grads = g.backward(loss)?;
        Ok(LossAndGrads {
            loss: g.data(loss)[0],
            grads: gradients_of(&p, &grads),
            near_zero_denominators: g.near_zero_denominators(),
        })
    }

    /// Summed loss and summed gradients over a batch, accumulated in slice
    /// order. Each record carries its own options (and so its own dropout
    /// seed).
    pub fn batch_loss_and_grads(&self, batch: &[(&FeatureRecord, ForwardOptions)]) -> Result<LossAndGrads> {
        let mut total: Option<LossAndGrads> = None;
        for (record, opts) in batch {
            let step = self.loss_and_grads(record, opts)?;
            match total.as_mut() {
                None => total = Some(step),
                Some(acc) => {
                    acc.loss += step.loss;
                    acc.near_zero_denominators += step.near_zero_denominators;
                    add_into(&mut acc.grads, &step.grads);
                }
            }
        }
        total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))
    }

    pub fn predict(&self, record: &FeatureRecord) -> Result<Prediction> {
        let out = self.forward(record, &ForwardOptions::eval())?;
        Ok(predict_from_logits(out.logits.data()))
    }
}

fn add_into(acc: &mut ModelParams<Tensor>, g: &ModelParams<Tensor>) {
    let mut leaves = Vec::new();
    g.visit("", &mut |_, t| leaves.push(t));
    let mut it = leaves.into_iter();
    acc.visit_mut("", &mut |_, a| {
        let t = it.next().expect("same parameter tree");
        for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
            *x += y;
        }
    });
}

/// Cross-entropy of `logits` (length 3) against `label`.
pub fn loss(logits: &[f64], label: Polarity) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(Tensor::row_vector(logits.to_vec()));
    let l = g.softmax_cross_entropy(z, label.index())?;
    Ok(g.data(l)[0])
}

/// Softmax probabilities and the arg-max class; ties go to the lowest index.
pub fn predict_from_logits(logits: &[f64]) -> Prediction {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut probabilities = [0.0; NUM_CLASSES];
    for (p, e) in probabilities.iter_mut().zip(&exps) {
        *p = e / total;
    }
    let best = (0..logits.len().min(NUM_CLASSES)).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    Prediction { class: Polarity::from_index(best).expect("index below class count"), probabilities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::{gen_synthetic, SynthSpec};

    fn tiny() -> ModelConfig {
        ModelConfig { head: HeadConfig::new(8, 2).unwrap(), ..ModelConfig::default() }
    }

    fn records(n: usize, count: usize) -> Vec<FeatureRecord> {
        gen_synthetic(&SynthSpec { seed: 11, examples: count, tokens: n, separation: 1.0 }).unwrap()
    }

    #[test]
    fn zero_parameters_give_bias_logits() {
        let mut m = GateMabsaModel::new(tiny(), 0).unwrap();
        m.params.visit_mut("", &mut |_, t| t.fill(0.0));
        let out = m.forward(&records(4, 1)[0], &ForwardOptions::eval()).unwrap();
        assert_eq!(out.logits.data(), &[0.0; 3]);
    }

    #[test]
    fn eval_forward_is_idempotent() {
        let m = GateMabsaModel::new(tiny(), 1).unwrap();
        let r = &records(5, 1)[0];
        let a = m.forward(r, &ForwardOptions::eval()).unwrap().logits;
        let b = m.forward(r, &ForwardOptions::eval()).unwrap().logits;
        assert_eq!(a, b);
        // Train mode with a fixed seed is reproducible too.
        let a = m.forward(r, &ForwardOptions::train(3)).unwrap().logits;
        let b = m.forward(r, &ForwardOptions::train(3)).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn empty_record_is_rejected() {
        let m = GateMabsaModel::new(tiny(), 0).unwrap();
        let mut r = records(2, 1).remove(0);
        r.n_tokens = 0;
        r.token_feats = Tensor::zeros(0, TEXT_DIM);
        r.adjacency = Tensor::zeros(0, 0);
        r.aspect_positions.clear();
        assert!(matches!(m.forward(&r, &ForwardOptions::eval()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn loss_examples() {
        assert!((loss(&[0.0; 3], Polarity::Neutral).unwrap() - 3f64.ln()).abs() < 1e-12);
        let m = GateMabsaModel::new(tiny(), 2).unwrap();
        let r = &records(4, 1)[0];
        let single = m.loss_and_grads(r, &ForwardOptions::eval()).unwrap().loss;
        let logits = m.forward(r, &ForwardOptions::eval()).unwrap().logits;
        assert!((loss(logits.data(), r.label).unwrap() - single).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_from_logits(&[5.0, 0.0, 0.0]).class, Polarity::Negative);
        assert_eq!(predict_from_logits(&[0.0, 0.0, 0.0]).class, Polarity::Negative);
        assert_eq!(predict_from_logits(&[0.0, 2.0, 2.0]).class, Polarity::Neutral);
        let p = predict_from_logits(&[0.3, -1.2, 2.5]);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted = predict_from_logits(&[10.3, 8.8, 12.5]);
        assert_eq!(shifted.class, p.class);
        for (a, b) in shifted.probabilities.iter().zip(p.probabilities) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_width_model_has_no_text_projection() {
        let cfg = ModelConfig { head: HeadConfig::new(TEXT_DIM, 6).unwrap(), ..ModelConfig::default() };
        assert!(!cfg.has_text_proj());
        assert!(tiny().has_text_proj());
    }

    #[test]
    fn pad_length_beyond_limit_is_rejected() {
        let m = GateMabsaModel::new(ModelConfig { max_seq_len: 6, ..tiny() }, 0).unwrap();
        let r = &records(4, 1)[0];
        let opts = ForwardOptions { pad_to: Some(7), ..ForwardOptions::eval() };
        assert!(m.forward(r, &opts).is_err());
    }

    #[test]
    fn long_records_are_truncated() {
        let m = GateMabsaModel::new(ModelConfig { max_seq_len: 4, ..tiny() }, 0).unwrap();
        let r = &records(9, 1)[0];
        let opts = ForwardOptions { trace: true, ..ForwardOptions::eval() };
        let out = m.forward(r, &opts).unwrap();
        assert_eq!(out.traces.unwrap().fuse[0].d.shape(), &[4, 4]);
    }
}
