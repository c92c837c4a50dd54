//! Experiment configuration. The merged, effective config is embedded in every
//! run report so a run can be reconstructed from its report alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GaussianStreamSpec;
use crate::error::{Error, Result};
use crate::optim::SgdConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Optimiser settings for one training phase. The step count is derived from
/// the epoch count and the number of batches per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl PhaseConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 48,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(&self, steps_per_epoch: usize) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            total_steps: self.epochs * steps_per_epoch,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!("{name}.epochs must be >= 1")));
        }
        self.sgd(1)
            .validate()
            .map_err(|e| Error::Config(format!("{name}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSource {
    Synthetic(GaussianStreamSpec),
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Hidden widths after the input; the last entry is the embedding width.
    pub hidden: Vec<usize>,
    pub train: PhaseConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            train: PhaseConfig::with_epochs(20),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub scale: f64,
    pub train: PhaseConfig,
    /// Sum the frozen older adapters into the training feature as well.
    pub train_with_old_adapters: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck: 16,
            scale: crate::adapter::DEFAULT_SCALE,
            train: PhaseConfig::with_epochs(20),
            train_with_old_adapters: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Learned,
    Functional,
    Oracle,
    Noise,
}

impl std::str::FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "functional" => Ok(Self::Functional),
            "oracle" => Ok(Self::Oracle),
            "noise" | "noise_ablation" => Ok(Self::Noise),
            other => Err(Error::Config(format!("unknown gate mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ThresholdPolicy {
    Fixed { value: f64 },
    /// Sweep thresholds on a held-out slice of gate-training data, maximising balanced accuracy.
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub hidden: usize,
    pub mode: GateMode,
    pub threshold: ThresholdPolicy,
    /// Stored embeddings per old class; 0 switches to the per-class Gaussian sampler.
    pub buffer_per_class: usize,
    /// Samples drawn per old class by the Gaussian sampler.
    pub sampler_per_class: usize,
    pub train: PhaseConfig,
    /// Extra negatives made by perturbing positives, as a multiple of the positive count.
    pub outlier_ratio: f64,
    /// Perturbation size for those negatives, in units of the positives' per-column spread.
    pub outlier_scale: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            mode: GateMode::Learned,
            threshold: ThresholdPolicy::Fixed { value: 0.5 },
            buffer_per_class: 50,
            sampler_per_class: 50,
            train: PhaseConfig::with_epochs(10),
            outlier_ratio: 2.0,
            outlier_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureHeadKind {
    Identity,
    RandomMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub scoring: Scoring,
    pub feature_head: FeatureHeadKind,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            scoring: Scoring::Cosine,
            feature_head: FeatureHeadKind::Identity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Artsy,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub method: Method,
    pub stream: StreamSource,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub gate: GateConfig,
    pub classifier: ClassifierConfig,
    pub eval_threads: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            method: Method::Artsy,
            stream: StreamSource::Synthetic(GaussianStreamSpec::default()),
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            gate: GateConfig::default(),
            classifier: ClassifierConfig::default(),
            eval_threads: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if let StreamSource::Synthetic(spec) = &self.stream {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.backbone.hidden.is_empty() || self.backbone.hidden.contains(&0) {
            return Err(Error::Config("backbone.hidden must be non-empty positive widths".into()));
        }
        self.backbone.train.validate("backbone.train")?;
        if self.adapter.bottleneck == 0 {
            return Err(Error::Config("adapter.bottleneck must be >= 1".into()));
        }
        if !self.adapter.scale.is_finite() {
            return Err(Error::Config("adapter.scale must be finite".into()));
        }
        self.adapter.train.validate("adapter.train")?;
        self.gate.train.validate("gate.train")?;
        if self.gate.train.batch_size < 2 {
            return Err(Error::Config("gate.train.batch_size must be >= 2 for balanced batches".into()));
        }
        if self.gate.hidden == 0 {
            return Err(Error::Config("gate.hidden must be >= 1".into()));
        }
        if let ThresholdPolicy::Fixed { value } = self.gate.threshold {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("gate threshold {value} outside [0, 1]")));
            }
        }
        if self.gate.buffer_per_class == 0 && self.gate.sampler_per_class == 0 {
            return Err(Error::Config(
                "gate.sampler_per_class must be >= 1 when buffer_per_class is 0".into(),
            ));
        }
        if !(self.gate.outlier_ratio >= 0.0 && self.gate.outlier_ratio.is_finite()) {
            return Err(Error::Config("gate.outlier_ratio must be >= 0".into()));
        }
        if !(self.gate.outlier_scale > 0.0 && self.gate.outlier_scale.is_finite()) {
            return Err(Error::Config("gate.outlier_scale must be > 0".into()));
        }
        if self.eval_threads == 0 {
            return Err(Error::Config("eval_threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses a config file. Omitted sections take their defaults; `version`
    /// is required and unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if value.get("version").is_none() {
            return Err(Error::Config("config is missing the `version` field".into()));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let c = ExperimentConfig::default();
        assert_eq!(c.adapter.train.epochs, 20);
        assert_eq!(c.gate.train.epochs, 10);
        assert_eq!(c.adapter.train.batch_size, 48);
        assert_eq!(c.gate.train.base_lr, 0.01);
        assert_eq!(c.adapter.bottleneck, 16);
        assert_eq!(c.gate.buffer_per_class, 50);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let bad = ExperimentConfig { version: 2, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["gate"]["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn partial_file_fills_defaults_but_needs_version() {
        let c = ExperimentConfig::from_json(r#"{"version": 1, "seed": 4, "gate": {"mode": "oracle"}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.gate.mode, GateMode::Oracle);
        assert_eq!(c.gate.hidden, 32);
        assert!(matches!(ExperimentConfig::from_json(r#"{"seed": 4}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json("{"), Err(Error::Config(_))));
    }
}
