//! TOML run configuration. Every field has a default and unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tirdet::augment::AugProfile;
use tirdet::data::{ProtocolKind, SplitProtocol, SyntheticSceneConfig};
use tirdet::error::{Error, Result};
use tirdet::evaluate::EVAL_IOU;
use tirdet::model_graph::ModelConfig;
use tirdet::postprocess::{DEFAULT_NMS_IOU, DETECT_CONF_THRESHOLD, EVAL_CONF_THRESHOLD};
use tirdet::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset manifest; when absent, `train` synthesizes one into the run
    /// directory from `synth`.
    pub manifest: Option<PathBuf>,
    pub synth: SyntheticSceneConfig,
    pub n_images: usize,
    /// Partition preset, `DS1` or `DS2`.
    pub dataset: String,
    /// Overrides the preset's training ranges when non-empty.
    pub train_ranges: Vec<f64>,
    /// Overrides the preset's decorrelated test ranges when non-empty.
    pub test_ranges: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SyntheticSceneConfig::default(),
            n_images: 250,
            dataset: "DS1".into(),
            train_ranges: Vec::new(),
            test_ranges: Vec::new(),
        }
    }
}

impl DataSection {
    pub fn protocol(&self, kind: ProtocolKind) -> Result<SplitProtocol> {
        let mut p = SplitProtocol::preset(&self.dataset, kind)?;
        if !self.train_ranges.is_empty() {
            p.train_ranges = self.train_ranges.clone();
            if kind == ProtocolKind::T1Correlated {
                p.test_ranges = self.train_ranges.clone();
            }
        }
        if kind == ProtocolKind::T2Decorrelated && !self.test_ranges.is_empty() {
            p.test_ranges = self.test_ranges.clone();
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub iou: f64,
    pub detect_conf: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { conf_threshold: EVAL_CONF_THRESHOLD, nms_iou: DEFAULT_NMS_IOU, iou: EVAL_IOU, detect_conf: DETECT_CONF_THRESHOLD }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.conf_threshold) || !ok(self.detect_conf) || !(self.nms_iou > 0.0 && self.nms_iou < 1.0) || !(self.iou > 0.0 && self.iou <= 1.0) {
            return Err(Error::Config("eval thresholds must lie in [0, 1] and IoUs in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Augmentation hyperparameters under their customary names. `fl_gamma`
    /// here drives the focal loss.
    pub aug: AugProfile,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Training config with the focal gamma taken from the augmentation table.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.loss.fl_gamma = self.aug.fl_gamma;
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.aug.validate()?;
        self.effective_train().validate()?;
        self.eval.validate()?;
        self.data.synth.validate()
    }
}
