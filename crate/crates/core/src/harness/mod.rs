//! Training, evaluation, diagnostics and variant ablation on synthetic data.

mod ablate;
mod evaluate;
mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::encoders::{ModelConfig, VideoRepr};
use crate::error::{MbvrError, Result};
use crate::losses::{LossConfig, MsSampling};

pub use ablate::{ablate, AblationRow, AblationTable, VariantSummary};
pub use evaluate::{analyze, evaluate, random_precision_baseline, AnalyzeOptions, Diagnostics, EVAL_RELEVANT_LABEL};
pub use optim::Optimizer;
pub use train::{train, StepLoss, TrainOutcome};

/// Which representation and loss terms a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Videos are represented by their text embedding alone.
    #[serde(rename = "text_only")]
    TextOnly,
    /// Videos are represented by their vision embedding alone.
    #[serde(rename = "vision_only")]
    VisionOnly,
    /// Fused videos; bidirectional loss plus both auxiliary losses.
    #[serde(rename = "base")]
    Base,
    /// Base plus the MS-negative loss.
    #[serde(rename = "base+ms")]
    BaseMs,
    /// Base with the dynamic margin.
    #[serde(rename = "base+dm")]
    BaseDm,
    /// Base with both the MS-negative loss and the dynamic margin.
    #[serde(rename = "mbvr")]
    Mbvr,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::TextOnly,
        Variant::VisionOnly,
        Variant::Base,
        Variant::BaseMs,
        Variant::BaseDm,
        Variant::Mbvr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text_only",
            Variant::VisionOnly => "vision_only",
            Variant::Base => "base",
            Variant::BaseMs => "base+ms",
            Variant::BaseDm => "base+dm",
            Variant::Mbvr => "mbvr",
        }
    }

    pub fn repr(self) -> VideoRepr {
        match self {
            Variant::TextOnly => VideoRepr::TextOnly,
            Variant::VisionOnly => VideoRepr::VisionOnly,
            _ => VideoRepr::Fused,
        }
    }

    pub fn uses_ms(self) -> bool {
        matches!(self, Variant::BaseMs | Variant::Mbvr)
    }

    pub fn uses_margin(self) -> bool {
        matches!(self, Variant::BaseDm | Variant::Mbvr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MbvrError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MbvrError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub seed: u64,
    pub ms_sampling: MsSampling,
    /// Mask in-batch negatives whose text topic matches the query topic.
    pub exclude_same_topic: bool,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Mbvr,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            epochs: 3,
            seed: 0,
            ms_sampling: MsSampling::Uniform,
            exclude_same_topic: false,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(MbvrError::Config(
                "batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MbvrError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| MbvrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short stable hash of the canonical TOML form; names run directories.
    pub fn hash(&self) -> String {
        codec::short_hash(self.to_toml().as_bytes())
    }

    /// One-line stamp identifying the configuration and seed of an artifact.
    pub fn stamp(&self) -> String {
        format!("# config={} seed={} variant={}", self.hash(), self.seed, self.variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("vision".parse::<Variant>().is_err());
    }

    #[test]
    fn config_toml_round_trips_and_hash_is_stable() {
        let cfg = TrainConfig {
            variant: Variant::BaseMs,
            seed: 9,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(TrainConfig::default().hash(), cfg.hash());
        let partial = TrainConfig::from_toml("variant = \"base+dm\"\n[loss]\ngamma = 0.5\n").unwrap();
        assert_eq!(partial.variant, Variant::BaseDm);
        assert_eq!(partial.loss.gamma, 0.5);
        assert_eq!(partial.loss.tau, 0.07);
        assert!(TrainConfig::from_toml("batch_size = 1").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }
}
