//! Run configuration: modality declarations, iteration budget, prior
//! settings, and the sampling defaults used by query-time prediction.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::PreprocessStep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    High,
    Low,
}

/// Requested rank for a high-dimensional modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RankSpec {
    Auto(AutoTag),
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl RankSpec {
    pub const AUTO: RankSpec = RankSpec::Auto(AutoTag::Auto);

    pub fn fixed(&self) -> Option<usize> {
        match self {
            RankSpec::Fixed(r) => Some(*r),
            RankSpec::Auto(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub id: String,
    pub kind: ModalityKind,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankSpec>,
    #[serde(default)]
    pub preprocess: Vec<PreprocessStep>,
}

/// Mixture sizes for the empirical-Bayes fits: automatic cube-root defaults
/// or explicit counts for the joint prior and each per-modality prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GmmComponents {
    Auto(AutoTag),
    Fixed { mu: usize, nu: Vec<usize> },
}

impl Default for GmmComponents {
    fn default() -> Self {
        GmmComponents::Auto(AutoTag::Auto)
    }
}

/// Prior family used by the fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorClass {
    #[default]
    Gmm,
    Npmle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub modalities: Vec<ModalitySpec>,
    pub iterations: usize,
    #[serde(default)]
    pub gmm_components: GmmComponents,
    pub seed: u64,
    pub alpha: f64,
    pub mc_samples: usize,
    #[serde(default)]
    pub prior_class: PriorClass,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.modalities.iter().filter(|s| s.kind == ModalityKind::High).count();
        let total = self.modalities.len();
        if m < 1 {
            return Err(Error::Schema("at least one high-dimensional modality is required".into()));
        }
        if total < 2 {
            return Err(Error::Schema("at least two modalities are required".into()));
        }
        if self.mc_samples < 1000 {
            return Err(Error::Schema(format!(
                "mc_samples must be at least 1000, got {}",
                self.mc_samples
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Schema(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        let mut seen = std::collections::HashSet::new();
        for spec in &self.modalities {
            if !seen.insert(spec.id.clone()) {
                return Err(Error::Schema(format!("duplicate modality id {:?}", spec.id)));
            }
            match spec.kind {
                ModalityKind::Low => {
                    if spec.rank.is_some() {
                        return Err(Error::Schema(format!(
                            "low-dimensional modality {:?} must not declare a rank",
                            spec.id
                        )));
                    }
                }
                ModalityKind::High => {
                    if let Some(RankSpec::Fixed(0)) = spec.rank {
                        return Err(Error::Schema(format!(
                            "modality {:?}: fixed rank must be positive",
                            spec.id
                        )));
                    }
                }
            }
        }
        if let GmmComponents::Fixed { mu, nu } = &self.gmm_components {
            if *mu == 0 || nu.contains(&0) {
                return Err(Error::Schema("mixture sizes must be positive".into()));
            }
            if nu.len() != m {
                return Err(Error::Schema(format!(
                    "gmm_components.nu lists {} entries for {m} high-dimensional modalities",
                    nu.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
