//! Gated matrix-LSTM sentiment classifier over precomputed multimodal
//! features.
//!
//! The network stacks three gated decay blocks: a fusion block whose decay
//! is modulated by aspect and image gates, a syntax block driven by a
//! dependency-graph gate, and a semantic block combining aspect similarity
//! with a positional-distance penalty. Every block materializes its `n×n`
//! decay and combination matrices in the log domain.

pub mod blocks;
pub mod checkpoint;
pub mod encoder;
mod error;
pub mod feature_io;
pub mod mlstm;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod params;
pub mod training;

pub use error::{Error, Result};
pub use feature_io::{FeatureRecord, Manifest};
pub use mlstm::HeadConfig;
pub use model::{GateMabsaModel, ModelConfig};
pub use numerics::{Graph, Tensor, Var};
pub use training::{Metrics, TrainConfig};
