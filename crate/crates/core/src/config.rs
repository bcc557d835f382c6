//! Run configuration, read from a TOML file. Every section is optional and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Factor;
use crate::error::{Error, Result};
use crate::image_metrics::DEFAULT_EDGE_THRESHOLD;
use crate::regression::{DEFAULT_DEGREE, DEFAULT_RIDGE};
use crate::scene::SegmentationConfig;
use crate::sensitivity::DEFAULT_ALPHA;
use crate::uniformity::ClusterConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub degree: u32,
    pub ridge_lambda: f64,
    pub factors: Vec<Factor>,
    pub train_fraction: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            degree: DEFAULT_DEGREE,
            ridge_lambda: DEFAULT_RIDGE,
            factors: Factor::COLUMN_ORDER.to_vec(),
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationConfig {
    /// Min-max scale metric columns before the hypothesis tests.
    pub sensitivity: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig { sensitivity: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub segmentation: SegmentationConfig,
    pub clustering: ClusterConfig,
    /// Uses the bundled pristine model when unset.
    pub niqe_model_path: Option<PathBuf>,
    pub edge_threshold: f64,
    pub iou_thresh: f64,
    pub alpha: f64,
    pub regression: RegressionConfig,
    pub normalization: NormalizationConfig,
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            segmentation: SegmentationConfig::default(),
            clustering: ClusterConfig::default(),
            niqe_model_path: None,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            iou_thresh: 0.5,
            alpha: DEFAULT_ALPHA,
            regression: RegressionConfig::default(),
            normalization: NormalizationConfig::default(),
            threads: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        // Relative model paths are relative to the config file.
        if let (Some(p), Some(dir)) = (&cfg.niqe_model_path, path.parent()) {
            if p.is_relative() {
                cfg.niqe_model_path = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.clustering.validate()?;
        if !(self.edge_threshold > 0.0 && self.edge_threshold <= 1.0) {
            return Err(Error::invalid("edge_threshold must lie in (0, 1]"));
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(Error::invalid("iou_thresh must lie in (0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        let r = &self.regression;
        if r.degree < 1 {
            return Err(Error::invalid("regression.degree must be at least 1"));
        }
        if !(r.ridge_lambda >= 0.0 && r.ridge_lambda.is_finite()) {
            return Err(Error::invalid("regression.ridge_lambda must be >= 0"));
        }
        if r.factors.is_empty() {
            return Err(Error::invalid("regression.factors is empty"));
        }
        if !(r.train_fraction > 0.0 && r.train_fraction < 1.0) {
            return Err(Error::invalid("regression.train_fraction must lie in (0, 1)"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be at least 1"));
        }
        Ok(())
    }
}
