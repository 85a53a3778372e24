use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circumferential::{CircWeights, PathParams};
use crate::dtw::LongWeights;
use crate::metrics::{Disagreement, WilliamsConfig};

/// Registration and evaluation settings. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// `[lumen, side_branch, calcium, position]`
    pub long_weights: LongWeights,
    /// `[side_branch, calcium, eccentricity]`
    pub circ_weights: CircWeights,
    /// Longitudinal smoothing width in frames.
    pub sigma: f64,
    pub lambda: f64,
    pub delta_max_deg_per_mm: f64,
    pub calcium_anchor_threshold: f64,
    pub strict_sidebranch_zeroing: bool,
    pub bootstrap_seed: u64,
    pub bootstrap_resamples: usize,
    pub williams_disagreement: Disagreement,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            long_weights: LongWeights::default(),
            circ_weights: CircWeights::default(),
            sigma: 2.0,
            lambda: DEFAULT_LAMBDA,
            delta_max_deg_per_mm: 30.0,
            calcium_anchor_threshold: 0.05,
            strict_sidebranch_zeroing: false,
            bootstrap_seed: 0,
            bootstrap_resamples: 2000,
            williams_disagreement: Disagreement::Mean,
        }
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if !self.long_weights.is_valid() {
            return fail("long_weights must be non-negative with at least one positive entry");
        }
        if !self.circ_weights.is_valid() {
            return fail("circ_weights must be non-negative with at least one positive entry");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail("sigma must be a finite value >= 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be a finite value >= 0");
        }
        if !(self.delta_max_deg_per_mm > 0.0) {
            return fail("delta_max_deg_per_mm must be > 0");
        }
        if !(0.0..=1.0).contains(&self.calcium_anchor_threshold) {
            return fail("calcium_anchor_threshold must lie in [0, 1]");
        }
        if self.bootstrap_resamples < 1 {
            return fail("bootstrap_resamples must be >= 1");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: EngineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn path_params(&self) -> PathParams {
        PathParams {
            lambda: self.lambda,
            delta_max_deg_per_mm: self.delta_max_deg_per_mm,
        }
    }

    pub fn williams(&self) -> WilliamsConfig {
        WilliamsConfig {
            disagreement: self.williams_disagreement,
            resamples: self.bootstrap_resamples,
            seed: self.bootstrap_seed,
        }
    }
}
