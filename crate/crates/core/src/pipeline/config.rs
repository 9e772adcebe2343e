//! The pipeline configuration document.
//!
//! One TOML file covers processing, geometry, taxonomy and the model
//! specifications. Its canonical serialization is embedded verbatim in
//! every report header together with [`CONFIG_VERSION`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotation::{LabelTaxonomy, ADJUDICATOR};
use crate::decomposition::{DecompositionParams, ImpulseResponse, DEFAULT_TAU1, DEFAULT_TAU2};
use crate::error::{Error, Result};
use crate::lmm::LmmSpec;
use crate::scr::{DetectionParams, SdDivisor};
use crate::segmentation::CrossingGeometry;
use crate::signal::DEFAULT_SMOOTH_WINDOW;

/// Schema version of the configuration document.
pub const CONFIG_VERSION: u32 = 1;

const DEFAULT_MODELS: [&str; 4] = [
    include_str!("../../config/models/factors.toml"),
    include_str!("../../config/models/avatar.toml"),
    include_str!("../../config/models/segments.toml"),
    include_str!("../../config/models/labels.toml"),
];

/// Where SCR labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Coder records supplied with the sessions.
    #[default]
    Records,
    /// Labels of matched ground-truth responses (synthetic sessions).
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessingConfig {
    /// Gaussian window in 10 Hz samples.
    pub smooth_window: usize,
    /// Smooth the trace before decomposition; otherwise the decomposed
    /// driver and phasic components are smoothed before detection.
    pub smooth_before_decompose: bool,
    pub tau1: f64,
    pub tau2: f64,
    /// Fit per-session impulse time constants instead of using `tau1/tau2`.
    pub optimize_taus: bool,
    /// Sample-to-sample jump (µS, raw rate) flagged as an artifact.
    pub artifact_max_jump_us: f64,
    pub artifact_pad_s: f64,
    pub sd_divisor: SdDivisor,
    /// Coder whose labels are applied; adjudicated records always win.
    pub coder: String,
    pub label_source: LabelSource,
    /// Sessions whose masked fraction exceeds this are dropped.
    pub max_masked_fraction: f64,
}

impl Default for ProcessingConfig {
    fn default() -> Self {
        Self {
            smooth_window: DEFAULT_SMOOTH_WINDOW,
            smooth_before_decompose: true,
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            optimize_taus: false,
            artifact_max_jump_us: 1.0,
            artifact_pad_s: 0.5,
            sd_divisor: SdDivisor::Population,
            coder: ADJUDICATOR.to_string(),
            label_source: LabelSource::Records,
            max_masked_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub no_median: CrossingGeometry,
    pub with_median: CrossingGeometry,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { no_median: CrossingGeometry::no_median(), with_median: CrossingGeometry::with_median() }
    }
}

impl GeometryConfig {
    pub fn for_session(&self, median: bool) -> &CrossingGeometry {
        if median {
            &self.with_median
        } else {
            &self.no_median
        }
    }
}

/// A model specification plus the rows it applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    #[serde(flatten)]
    pub spec: LmmSpec,
    /// Panel column → admissible values; rows outside are not part of this
    /// model's dataset.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub filter: BTreeMap<String, Vec<String>>,
}

impl ModelEntry {
    pub fn from_toml(text: &str) -> Result<Self> {
        let entry: Self = toml::from_str(text).map_err(|e| Error::ModelSpec(e.to_string()))?;
        entry.spec.validate()?;
        Ok(entry)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub processing: ProcessingConfig,
    pub decomposition: DecompositionParams,
    pub detection: DetectionParams,
    pub geometry: GeometryConfig,
    pub taxonomy: LabelTaxonomy,
    pub models: Vec<ModelEntry>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            processing: ProcessingConfig::default(),
            decomposition: DecompositionParams::default(),
            detection: DetectionParams::default(),
            geometry: GeometryConfig::default(),
            taxonomy: LabelTaxonomy::default(),
            models: DEFAULT_MODELS
                .iter()
                .map(|t| ModelEntry::from_toml(t).expect("bundled model spec is valid"))
                .collect(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization, as embedded in reports.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let p = &self.processing;
        if p.smooth_window == 0 {
            return Err(Error::Config("smooth_window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&p.max_masked_fraction) {
            return Err(Error::Config("max_masked_fraction must be in [0, 1]".into()));
        }
        if !(p.artifact_max_jump_us > 0.0) || !(p.artifact_pad_s >= 0.0) {
            return Err(Error::Config("artifact thresholds must be positive".into()));
        }
        self.impulse()?;
        self.geometry.no_median.validate()?;
        self.geometry.with_median.validate()?;
        if self.geometry.no_median.has_median() || !self.geometry.with_median.has_median() {
            return Err(Error::Config("geometry presets swapped: no_median must lack the median strip".into()));
        }
        LabelTaxonomy::new(self.taxonomy.labels.clone())?;
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            m.spec.validate()?;
            if !names.insert(m.spec.name.as_str()) {
                return Err(Error::Config(format!("model name {:?} used twice", m.spec.name)));
            }
        }
        Ok(())
    }

    pub fn impulse(&self) -> Result<ImpulseResponse> {
        ImpulseResponse::new(self.processing.tau1, self.processing.tau2)
    }
}
