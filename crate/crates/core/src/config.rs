//! Model and training configuration, and the ablation variants expressed as
//! transforms of one default configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphConfig, GraphVariant};
use crate::objective::{Hyperparams, ReconTarget};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_prime: usize,
    pub hidden: usize,
    pub code_len: usize,
    /// Add the attention residual; when false the network sees `P_x x`.
    pub attention: bool,
    /// Train the projections together with the network.
    pub joint_attention: bool,
    pub graph: GraphConfig,
    pub hp: Hyperparams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_prime: 512,
            hidden: 1024,
            code_len: 32,
            attention: true,
            joint_attention: false,
            graph: GraphConfig::default(),
            hp: Hyperparams::coco(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_prime == 0 || self.hidden == 0 || self.code_len == 0 {
            return Err(Error::Parameter("d_prime, hidden and code_len must be >= 1".into()));
        }
        self.graph.validate()?;
        self.hp.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Recorded for reference only; every step uses the whole training graph.
    pub batch: Option<usize>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub disc_steps_per_gen_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 300,
            batch: None,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            disc_steps_per_gen_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if self.disc_steps_per_gen_step == 0 {
            return Err(Error::Parameter("disc_steps_per_gen_step must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ablation variants of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoAux,
    NoAtt,
    OnlySv,
    OnlySa,
    ReconsZtz,
    ReconsFeat,
    ReconsS,
    ReconsSv,
    ReconsSa,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::NoAux,
        Variant::NoAtt,
        Variant::OnlySv,
        Variant::OnlySa,
        Variant::ReconsZtz,
        Variant::ReconsFeat,
        Variant::ReconsS,
        Variant::ReconsSv,
        Variant::ReconsSa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAux => "no-aux",
            Variant::NoAtt => "no-att",
            Variant::OnlySv => "only-sv",
            Variant::OnlySa => "only-sa",
            Variant::ReconsZtz => "recons-ztz",
            Variant::ReconsFeat => "recons-feat",
            Variant::ReconsS => "recons-s",
            Variant::ReconsSv => "recons-sv",
            Variant::ReconsSa => "recons-sa",
        }
    }

    /// Applies the variant on top of `cfg`.
    pub fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        match self {
            Variant::Full | Variant::ReconsSa => cfg.hp.recon_target = ReconTarget::Aux,
            Variant::NoAux => {
                // no semantics anywhere: visual graph, no attention, no
                // classification term, visual reconstruction target
                cfg.graph.variant = GraphVariant::VisualOnly;
                cfg.attention = false;
                cfg.hp.lambda3 = 0.0;
                cfg.hp.recon_target = ReconTarget::Visual;
            }
            Variant::NoAtt => cfg.attention = false,
            Variant::OnlySv => cfg.graph.variant = GraphVariant::VisualOnly,
            Variant::OnlySa => cfg.graph.variant = GraphVariant::AuxOnly,
            Variant::ReconsZtz => cfg.hp.recon_target = ReconTarget::InnerProduct,
            Variant::ReconsFeat => cfg.hp.recon_target = ReconTarget::Feature,
            Variant::ReconsS => cfg.hp.recon_target = ReconTarget::Augmented,
            Variant::ReconsSv => cfg.hp.recon_target = ReconTarget::Visual,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}
