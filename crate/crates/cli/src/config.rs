//! Run configuration: command-line flags override a JSON config file,
//! which overrides the built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use uddml::nuisance::{BoostingParams, Clip, OutcomeLearner, PropensityLearner};
use uddml::{Error, NuisanceConfig, Result};

pub const DEFAULT_RHO0: f64 = 0.85;
pub const DEFAULT_BUDGET: usize = uddml::design::DEFAULT_BUDGET;
pub const DEFAULT_K_SIMULATED: usize = 2;
pub const DEFAULT_K_REAL: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SEED: u64 = 0;

pub const CACHE_ENV: &str = "UDDML_CACHE_DIR";

/// Every field optional: the JSON config file mirrors the flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub rp: Option<usize>,
    pub r: Option<usize>,
    pub rho0: Option<f64>,
    pub budget: Option<usize>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub design_seed: Option<u64>,
    pub outcome_learner: Option<OutcomeLearner>,
    pub propensity_learner: Option<PropensityLearner>,
    pub boosting: Option<BoostingParams>,
    pub clip: Option<Clip>,
    pub cache_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Schema(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("config {}: {e}", path.display())))
    }

    pub fn nuisance(
        &self,
        outcome: Option<OutcomeLearner>,
        propensity: Option<PropensityLearner>,
    ) -> NuisanceConfig {
        let d = NuisanceConfig::default();
        NuisanceConfig {
            outcome_learner: outcome.or(self.outcome_learner).unwrap_or(d.outcome_learner),
            propensity_learner: propensity.or(self.propensity_learner).unwrap_or(d.propensity_learner),
            boosting: self.boosting.unwrap_or(d.boosting),
            clip: self.clip.unwrap_or(d.clip),
        }
    }
}

/// First present value: flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Cache directory: flag, then config file, then `$UDDML_CACHE_DIR`, then
/// `$HOME/.cache/uddml`. `None` means in-memory only.
pub fn cache_dir(flag: Option<PathBuf>, file: Option<PathBuf>) -> Option<PathBuf> {
    flag.or(file)
        .or_else(|| std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache").join("uddml")))
}
