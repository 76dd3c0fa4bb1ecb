//! Mini-batch Adam training with early stopping on dev loss.

mod adam;
mod config;
mod early_stopping;
mod metrics;

use std::fs::File;
use std::io::{BufWriter, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, Adam, AdamConfig};
pub use config::TrainConfig;
pub use early_stopping::{trace as early_stopping_trace, EarlyStopping, StopDecision, MIN_IMPROVEMENT};
pub use metrics::{classification_metrics, evaluate, ClassMetrics, Metrics};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::feature_io::{FeatureRecord, Manifest, Split};
use crate::model::{ForwardOptions, GateMabsaModel};

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-record training loss (train mode, with dropout).
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
    /// Near-zero normalization denominators seen during the epoch's
    /// training passes.
    pub near_zero_denominators: usize,
    pub improved: bool,
}

/// Returned by the per-epoch callback of [`train_records`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest dev loss.
    pub best: GateMabsaModel,
    pub best_epoch: usize,
    /// Weights after the last completed epoch.
    pub last: GateMabsaModel,
    pub history: Vec<EpochReport>,
}

/// Trains on in-memory records. `on_epoch` sees every report together with
/// the current weights and may end training early.
pub fn train_records(
    config: &TrainConfig,
    train: &[FeatureRecord],
    dev: &[FeatureRecord],
    log: &mut dyn Write,
    on_epoch: &mut dyn FnMut(&EpochReport, &GateMabsaModel) -> Control,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("train and dev sets must both be non-empty".into()));
    }
    let mut model = GateMabsaModel::new(config.model_config(), config.seed)?;
    let mut optimizer = Adam::new(config.adam(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        let mut near_zero = 0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<_> = chunk.iter().map(|&i| (&train[i], ForwardOptions::train(rng.gen()))).collect();
            let step = model.batch_loss_and_grads(&items)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch + 1 });
            }
            train_loss_sum += step.loss;
            near_zero += step.near_zero_denominators;
            optimizer.update(&mut model.params, &step.grads)?;
        }

        let dev_metrics = evaluate(&model, dev)?;
        let decision = stopper.observe(epoch, dev_metrics.loss);
        if decision == StopDecision::Improved {
            best = model.clone();
        }
        let report = EpochReport {
            epoch,
            train_loss: train_loss_sum / train.len() as f64,
            dev_loss: dev_metrics.loss,
            dev_accuracy: dev_metrics.accuracy,
            dev_macro_f1: dev_metrics.macro_f1,
            near_zero_denominators: near_zero,
            improved: decision == StopDecision::Improved,
        };
        writeln!(log, "{}", serde_json::to_string(&report)?)?;
        let control = on_epoch(&report, &model);
        history.push(report);
        if decision == StopDecision::Stop || control == Control::Stop {
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch: stopper.best_epoch().unwrap_or(0), last: model, history })
}

/// Loads the manifests named in `config`, trains, and writes the best
/// checkpoint and (optionally) the epoch log.
///
/// Training uses the `train` entries of the train manifest and dev loss is
/// measured on the `dev` entries of the dev manifest.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    for (name, p) in [("train_manifest", &config.train_manifest), ("dev_manifest", &config.dev_manifest)] {
        if p.as_os_str().is_empty() {
            return Err(Error::Config(format!("{name} is required")));
        }
    }
    let train_set = Manifest::load(&config.train_manifest)?.split(Split::Train).load_records()?;
    let dev_set = Manifest::load(&config.dev_manifest)?.split(Split::Dev).load_records()?;
    if train_set.is_empty() {
        return Err(Error::Config(format!("{} has no train entries", config.train_manifest.display())));
    }
    if dev_set.is_empty() {
        return Err(Error::Config(format!("{} has no dev entries", config.dev_manifest.display())));
    }
    let mut sink: Box<dyn Write> = match &config.log_path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::file(p, e))?)),
        None => Box::new(std::io::sink()),
    };
    let outcome = train_records(config, &train_set, &dev_set, &mut sink, &mut |_, _| Control::Continue)?;
    sink.flush()?;
    save_checkpoint(&outcome.best, &config.checkpoint_out)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::{gen_synthetic, SynthSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 4,
            n_heads: 2,
            model_dim: 8,
            patience: 2,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn data(seed: u64, examples: usize) -> Vec<FeatureRecord> {
        gen_synthetic(&SynthSpec { seed, examples, tokens: 5, separation: 2.0 }).unwrap()
    }

    #[test]
    fn runs_and_logs_one_line_per_epoch() {
        let mut log = Vec::new();
        let out =
            train_records(&tiny_config(), &data(1, 6), &data(2, 3), &mut log, &mut |_, _| Control::Continue).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), out.history.len());
        let first: EpochReport = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.epoch, 1);
        assert!(first.improved);
        let best_loss = out.history[out.best_epoch - 1].dev_loss;
        assert!(out.history[..out.best_epoch].iter().all(|r| r.dev_loss >= best_loss));
    }

    #[test]
    fn callback_can_stop_training() {
        let out = train_records(&tiny_config(), &data(1, 3), &data(2, 3), &mut std::io::sink(), &mut |r, _| {
            if r.epoch == 1 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let r = train_records(&tiny_config(), &[], &data(2, 3), &mut std::io::sink(), &mut |_, _| Control::Continue);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
