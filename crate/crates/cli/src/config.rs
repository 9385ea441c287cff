//! Resolved run configuration, persisted alongside the artifacts so every
//! stage sees the same settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mergecal_core::calib::CalibConfig;
use mergecal_core::model::{Activation, HeadSpec, LayerSpec, ModelSpec};
use mergecal_core::suite::SuiteConfig;
use mergecal_core::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeParams {
    pub method: MergeMethod,
    pub scale: f64,
}

impl Default for MergeParams {
    fn default() -> Self {
        MergeParams {
            method: MergeMethod::TaskArithmetic,
            scale: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub momentum: f64,
    pub batch_size: Option<usize>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            pretrain_epochs: 220,
            pretrain_lr: 0.5,
            finetune_epochs: 120,
            finetune_lr: 0.25,
            momentum: 0.85,
            batch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub hidden_dim: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { hidden_dim: 24 }
    }
}

/// Everything one run needs. The suite seed doubles as the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub suite: SuiteConfig,
    pub model: ModelParams,
    pub train: TrainParams,
    pub merge: MergeParams,
    pub calib: CalibConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            suite: SuiteConfig::default(),
            model: ModelParams::default(),
            train: TrainParams::default(),
            merge: MergeParams::default(),
            calib: CalibConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        self.calib.validate()?;
        if self.model.hidden_dim == 0 {
            return Err(CoreError::InvalidConfig("hidden_dim must be positive".into()));
        }
        if !(self.merge.scale.is_finite()) {
            return Err(CoreError::InvalidConfig("merge scale must be finite".into()));
        }
        Ok(())
    }

    /// The fixed backbone topology used by the pipeline: a linear stem, two
    /// residual MLP blocks with LayerNorms between them, plus a linear head.
    pub fn model_spec(&self) -> ModelSpec {
        let d = self.suite.input_dim;
        let h = self.model.hidden_dim;
        let block = || LayerSpec::ResidualBlock {
            inner: vec![
                LayerSpec::Linear {
                    in_dim: h,
                    out_dim: h,
                    has_bias: true,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::Linear {
                    in_dim: h,
                    out_dim: h,
                    has_bias: true,
                },
            ],
        };
        ModelSpec {
            input_dim: d,
            layers: vec![
                LayerSpec::Linear {
                    in_dim: d,
                    out_dim: h,
                    has_bias: true,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::LayerNorm { dim: h, eps: 1e-5 },
                block(),
                LayerSpec::LayerNorm { dim: h, eps: 1e-5 },
                block(),
                LayerSpec::LayerNorm { dim: h, eps: 1e-5 },
            ],
            head: Some(HeadSpec {
                in_dim: h,
                classes: self.suite.classes_per_task,
                has_bias: true,
            }),
            schema_version: 1,
        }
    }

    /// Deterministic run identifier: a content hash of the resolved config.
    pub fn run_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..12].to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
