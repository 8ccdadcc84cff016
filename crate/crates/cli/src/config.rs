use std::path::Path;

use ehr_frailty::synthgen::{CoefficientSource, GeneratorConfig};
use ehr_frailty::{Error, Result};
use serde::{Deserialize, Serialize};

/// The tiny synthetic configuration shipped with the binary, selected with
/// `--config @tiny`.
pub const TINY: &str = include_str!("../configs/tiny.toml");

/// Run configuration file. Every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `--seed` takes precedence, then this, then
    /// `generator.seed`.
    pub seed: Option<u64>,
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub analysis: AnalysisSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Equal-width bins for continuous stability histograms.
    pub bins: usize,
    /// Principal components for the joint stability report.
    pub components: usize,
    /// Bins per component for the joint stability report.
    pub joint_bins: usize,
    pub include_missing: bool,
    pub imputations: usize,
    pub ridge: f64,
    pub bootstrap: usize,
    pub practice_subsample_frac: f64,
    pub repeats: usize,
    pub draws: usize,
    pub base_risk: f64,
    /// Linear-predictor multiplier for slope draws.
    pub lp_scale: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            bins: 20,
            components: 2,
            joint_bins: 5,
            include_missing: false,
            imputations: 10,
            ridge: 1.0,
            bootstrap: 1000,
            practice_subsample_frac: 0.4,
            repeats: 5,
            draws: 1_000_000,
            base_risk: 0.10,
            lp_scale: 1.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(g) = &cfg.generator {
            g.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(spec: &str) -> Result<Self> {
        if spec == "@tiny" {
            return Self::from_toml(TINY);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn coefficients(&self) -> CoefficientSource {
        self.generator
            .as_ref()
            .map(|g| g.coefficients.clone())
            .unwrap_or_default()
    }
}
