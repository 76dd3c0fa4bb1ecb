use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::GraphMode;
use crate::error::{Error, Result};
use crate::mlstm::HeadConfig;
use crate::model::ModelConfig;

use super::AdamConfig;

/// Training run settings. Every field is optional in the JSON form; omitted
/// fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub model_dim: usize,
    /// Stabilizer added to every normalization denominator.
    pub eps: f64,
    pub graph_mode: GraphMode,
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    pub checkpoint_out: PathBuf,
    /// JSON-lines epoch log; none means no log file.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 10,
            batch_size: 32,
            dropout: 0.5,
            n_heads: 6,
            max_seq_len: 128,
            patience: 5,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            model_dim: 768,
            eps: 1e-6,
            graph_mode: GraphMode::RowAggregate,
            train_manifest: PathBuf::new(),
            dev_manifest: PathBuf::new(),
            checkpoint_out: PathBuf::from("model.gmwt"),
            log_path: None,
        }
    }
}

impl TrainConfig {
    /// Reads a JSON config. Relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let anchor = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut cfg.train_manifest);
        anchor(&mut cfg.dev_manifest);
        anchor(&mut cfg.checkpoint_out);
        if let Some(p) = cfg.log_path.as_mut() {
            anchor(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("patience", self.patience),
            ("model_dim", self.model_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.patience > self.epochs {
            problems.push(format!("patience {} exceeds epochs {}", self.patience, self.epochs));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            problems.push("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            problems.push("adam_eps must be positive".into());
        }
        if problems.is_empty() {
            self.model_config().validate()
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            head: HeadConfig { model_dim: self.model_dim, n_heads: self.n_heads, eps: self.eps },
            graph_mode: self.graph_mode,
            dropout: self.dropout,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}
