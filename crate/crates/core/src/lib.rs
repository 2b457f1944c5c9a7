//! Unsupervised hashing with attention-denoised semantics, an augmented
//! similarity graph and an adversarially regularized graph network, plus a
//! packed-bit Hamming retrieval and evaluation engine.

pub mod attention;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
mod linalg;
pub mod network;
pub mod objective;
pub mod retrieval;
mod rng;
pub mod trainer;

pub use config::{ModelConfig, TrainConfig, Variant};
pub use dataset::{AuxSemantics, DatasetSplit, FeatureFormat, FeatureMatrix, SynthData, SynthParams};
pub use error::{Error, Result};
pub use graph::{Bandwidth, GraphConfig, GraphVariant};
pub use objective::{AdversarialForm, Hyperparams, LossBreakdown, ReconTarget};
pub use retrieval::{ApDenominator, EvalOptions, EvalReport, HashCodes};
pub use trainer::{fit, TrainedModel, Trainer};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
